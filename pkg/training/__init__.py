# 配置、异常、损失函数、训练循环与 checkpoint
