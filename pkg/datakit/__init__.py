# 数据合成、清单管理与加载
