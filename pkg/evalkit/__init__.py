# 网格提取、几何指标与评估报告
