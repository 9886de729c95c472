"""
项目内统一的异常类型。

所有异常都继承自 MCSVError，CLI 根据异常类型决定退出码。
"""


class MCSVError(Exception):
    """所有业务异常的基类。"""


class ConfigError(MCSVError):
    """配置校验失败。一次性携带所有错误，而不是遇到第一个就退出。"""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("配置校验失败:\n  - " + "\n  - ".join(self.errors))


class DatasetError(MCSVError):
    """数据集相关错误，例如图片缺失或损坏。"""

    def __init__(self, message, sample_id=None):
        self.sample_id = sample_id
        if sample_id is not None:
            message = f"[{sample_id}] {message}"
        super().__init__(message)


class DegenerateViewError(MCSVError, ValueError):
    """(cos, sin) 对的模长接近 0，无法归一化。"""


class EmptyMeshError(MCSVError, ValueError):
    """空网格上无法采样或计算指标。"""


class NonFiniteLossError(MCSVError, FloatingPointError):
    """某个损失项出现 NaN/Inf。"""

    def __init__(self, part):
        self.part = part
        super().__init__(f"损失项 '{part}' 不是有限值")


class TrainingDivergedError(MCSVError):
    """训练发散，指向最后一个可用的 checkpoint。"""

    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        if checkpoint is not None:
            message = f"{message} (最后可用 checkpoint: {checkpoint})"
        super().__init__(message)
