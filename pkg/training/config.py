import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import types
import typing
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .errors import ConfigError

# --- 数据配置 ---
# 训练图片边长 (像素)，64 是桌面规模 (CPU 可跑) 下的选择
IMAGE_SIZE = 64
# 训练/验证/测试 划分比例
SPLIT_RATIOS = (0.7, 0.1, 0.2)
# 每个类别最多保留的样本数
CATEGORY_CAP = 500

# --- 网络结构配置 ---
LATENT_DIM = 256
PE_FREQS = 6
SHAPE_HIDDEN = (64, 64, 64, 64, 32)
TEXTURE_HIDDEN = 128
HYPER_HIDDEN = 512
HYPER_LAYERS = 6

# --- 渲染器配置 ---
MARCH_STEPS = 10
MAX_STEP = 0.5
CAMERA_DISTANCE = 2.7
FOV_DEG = 30.0
ALPHA_SCALE = 30.0
CONTROLLER_HIDDEN = 16

# --- 损失权重 ---
LAMBDA_GAN = 0.2
LAMBDA_CAM = 0.03
LAMBDA_SDF = 1.0
SOFT_IOU_WEIGHT = 0.1
TEMPERATURE = 0.3
R1_GAMMA = 10.0
# 训练时 lambda_metric 必须显式给出，按数据集取 0.03–0.1
LAMBDA_METRIC_RANGE = (0.03, 0.1)

# --- 优化器配置 ---
BATCH_SIZE = 12
LEARNING_RATE = 1e-4
ADAM_BETAS = (0.0, 0.9)
EPOCHS = 200

# --- 评估配置 ---
GRID_RESOLUTION = 128
SURFACE_POINTS = 100_000
FSCORE_THRESHOLDS = (1.0, 5.0, 10.0)

# --- 运行目录约定 ---
ENV_PREFIX = "MCSV"
LOG_DIRNAME = "logs"
LOG_FILENAME = "mcsv.log"
RUN_MANIFEST_NAME = "run_manifest.json"

SECTIONS = ("data", "model", "render", "prior", "loss", "trainer", "eval")


def _opt(section, default, help_text):
    return field(default=default, metadata={"section": section, "help": help_text})


@dataclass(frozen=True)
class TrainConfig:
    """
    训练、评估与渲染共享的全部配置项。
    每个字段在 metadata 中声明所属的 section，对外的键名为 "<section>.<name>"。
    """
    # data
    dataset_root: str = _opt("data", "", "数据集根目录 (包含 manifest.json)")
    image_size: int = _opt("data", IMAGE_SIZE, "图片边长 (像素)")
    split_ratios: tuple[float, ...] = _opt("data", SPLIT_RATIOS, "train/val/test 划分比例")
    category_cap: int = _opt("data", CATEGORY_CAP, "每个类别最多样本数")
    # model
    latent_dim: int = _opt("model", LATENT_DIM, "形状/纹理隐向量长度 l")
    pe_freqs: int = _opt("model", PE_FREQS, "位置编码频率个数 L_pe")
    shape_hidden: tuple[int, ...] = _opt("model", SHAPE_HIDDEN, "形状 MLP 各隐藏层宽度")
    texture_hidden: int = _opt("model", TEXTURE_HIDDEN, "纹理 MLP 隐藏层宽度")
    hyper_hidden: int = _opt("model", HYPER_HIDDEN, "超网络每个头的隐藏层宽度")
    hyper_layers: int = _opt("model", HYPER_LAYERS, "超网络每个头的线性层数")
    # render
    march_steps: int = _opt("render", MARCH_STEPS, "光线步进步数")
    max_step: float = _opt("render", MAX_STEP, "单步最大步长")
    controller: str = _opt("render", "learned", "步长控制器: learned | sphere")
    controller_hidden: int = _opt("render", CONTROLLER_HIDDEN, "LSTM 控制器隐藏维度")
    camera_distance: float = _opt("render", CAMERA_DISTANCE, "相机到原点的距离")
    fov_deg: float = _opt("render", FOV_DEG, "视场角 (度)")
    weak_perspective: bool = _opt("render", False, "是否使用弱透视 (正交) 相机")
    alpha_scale: float = _opt("render", ALPHA_SCALE, "alpha = sigmoid(-k * min_sdf) 中的 k")
    background: float = _opt("render", 1.0, "合成背景灰度值")
    # prior
    azimuth_lo: float = _opt("prior", 0.0, "方位角下界 (度)")
    azimuth_hi: float = _opt("prior", 360.0, "方位角上界 (度)")
    elevation_dist: str = _opt("prior", "uniform", "仰角分布: uniform | gaussian")
    elevation_lo: float = _opt("prior", 20.0, "仰角均匀分布下界 (度)")
    elevation_hi: float = _opt("prior", 40.0, "仰角均匀分布上界 (度)")
    elevation_mean: float = _opt("prior", 30.0, "仰角高斯均值 (度)")
    elevation_std: float = _opt("prior", 5.0, "仰角高斯标准差 (度)")
    tilt_dist: str = _opt("prior", "fixed", "倾斜角分布: fixed | uniform | gaussian")
    tilt_lo: float = _opt("prior", 0.0, "倾斜角下界 / 固定值 (度)")
    tilt_hi: float = _opt("prior", 0.0, "倾斜角上界 (度)")
    tilt_mean: float = _opt("prior", 0.0, "倾斜角高斯均值 (度)")
    tilt_std: float = _opt("prior", 0.0, "倾斜角高斯标准差 (度)")
    # loss
    lambda_metric: float | None = _opt("loss", None, "度量学习损失权重 λ1 (训练时必填)")
    lambda_gan: float = _opt("loss", LAMBDA_GAN, "对抗损失权重 λ2")
    lambda_cam: float = _opt("loss", LAMBDA_CAM, "视角循环损失权重 λ3")
    lambda_sdf: float = _opt("loss", LAMBDA_SDF, "SDF 正则权重 λ4")
    soft_iou: float = _opt("loss", SOFT_IOU_WEIGHT, "soft IoU 掩码损失系数")
    temperature: float = _opt("loss", TEMPERATURE, "度量损失温度 τ")
    r1_gamma: float = _opt("loss", R1_GAMMA, "R1 正则系数 γ")
    eikonal_weight: float = _opt("loss", 0.1, "SDF 正则中 eikonal 项权重")
    outside_weight: float = _opt("loss", 1.0, "SDF 正则中掩码外 hinge 权重")
    inside_weight: float = _opt("loss", 1.0, "SDF 正则中掩码内 hinge 权重")
    outside_margin: float = _opt("loss", 0.01, "掩码外最小 SDF 的间隔")
    conditional_discriminator: bool = _opt("loss", True, "判别器是否以类别为条件")
    # trainer
    batch_size: int = _opt("trainer", BATCH_SIZE, "批大小")
    learning_rate: float = _opt("trainer", LEARNING_RATE, "学习率 (所有模块共用)")
    adam_beta1: float = _opt("trainer", ADAM_BETAS[0], "Adam β1")
    adam_beta2: float = _opt("trainer", ADAM_BETAS[1], "Adam β2")
    epochs: int = _opt("trainer", EPOCHS, "训练轮数")
    seed: int = _opt("trainer", 0, "随机种子")
    strict: bool = _opt("trainer", False, "严格可复现模式 (单线程、确定性算法)")
    adversarial_every: int = _opt("trainer", 1, "每多少个重建步执行一次对抗步")
    pretrain_iters: int = _opt("trainer", 2000, "球体预训练迭代次数")
    pretrain_radius: float = _opt("trainer", 0.5, "球体预训练半径")
    checkpoint_every: int = _opt("trainer", 10, "每多少个 epoch 保存一次 checkpoint")
    multi_view_fraction: float = _opt("trainer", 0.0, "拥有第二视角监督的物体比例")
    camera_supervised: bool = _opt("trainer", False, "已知视角模式 (不使用视角预测器和对抗正则)")
    num_workers: int = _opt("trainer", 0, "数据解码线程数 (0 表示主线程)")
    device: str = _opt("trainer", "cpu", "torch 设备")
    # eval
    grid_resolution: int = _opt("eval", GRID_RESOLUTION, "提取网格时的 SDF 采样分辨率")
    surface_points: int = _opt("eval", SURFACE_POINTS, "每个网格表面采样点数")
    thresholds: tuple[float, ...] = _opt("eval", FSCORE_THRESHOLDS, "F-score 阈值 (单位: 0.01)")
    align: str = _opt("eval", "view", "评估对齐方式: none | view | icp")
    icp_iters: int = _opt("eval", 50, "ICP 最大迭代次数")
    eval_workers: int = _opt("eval", 1, "评估进程数")


_CHOICES = {
    "controller": ("learned", "sphere"),
    "elevation_dist": ("uniform", "gaussian"),
    "tilt_dist": ("fixed", "uniform", "gaussian"),
    "align": ("none", "view", "icp"),
}


def config_fields():
    """返回 {"section.name": Field} 映射，顺序与 TrainConfig 声明一致。"""
    return {f"{f.metadata['section']}.{f.name}": f for f in fields(TrainConfig)}


def describe_keys():
    """为 --help 生成所有配置键的说明行。"""
    lines = []
    for key, f in config_fields().items():
        lines.append(f"  {key:<34} (默认: {f.default!r}) {f.metadata['help']}")
    return "\n".join(lines)


def _coerce(value, annotation):
    """按照字段注解做类型转换，失败时抛出 TypeError。"""
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0])
    if origin is tuple:
        (item_type, _) = typing.get_args(annotation)
        if isinstance(value, (str, bytes)) or not hasattr(value, "__iter__"):
            raise TypeError(f"期望列表，得到 {value!r}")
        return tuple(_coerce(v, item_type) for v in value)
    if annotation is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise TypeError(f"期望 bool，得到 {value!r}")
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"期望 int，得到 {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"期望 float，得到 {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise TypeError(f"期望 str，得到 {value!r}")
        return value
    raise TypeError(f"不支持的字段类型 {annotation!r}")


def parse_scalar(text):
    """把命令行或环境变量里的文本解析成 TOML 值，解析不了就当作字符串。"""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def flatten_sections(table, errors):
    """把 {section: {key: value}} 展平成 {"section.key": value}。"""
    flat = {}
    for section, body in table.items():
        if not isinstance(body, dict):
            errors.append(f"未知配置键: {section} (配置项必须写在 [section] 下)")
            continue
        for key, value in body.items():
            flat[f"{section}.{key}"] = value
    return flat


def env_overrides(environ=None):
    """读取 MCSV_<SECTION>_<KEY> 形式的环境变量。"""
    environ = os.environ if environ is None else environ
    found = {}
    for key in config_fields():
        section, name = key.split(".", 1)
        env_name = f"{ENV_PREFIX}_{section}_{name}".upper()
        if env_name in environ:
            found[key] = parse_scalar(environ[env_name])
    return found


def parse_set_overrides(items, errors):
    """解析 --set key=value 列表。"""
    found = {}
    for item in items or ():
        if "=" not in item:
            errors.append(f"--set 参数格式错误 (需要 key=value): {item}")
            continue
        key, text = item.split("=", 1)
        found[key.strip()] = parse_scalar(text.strip())
    return found


def _check_ranges(values, require_training):
    errors = []

    def need(cond, message):
        if not cond:
            errors.append(message)

    for name, choices in _CHOICES.items():
        need(values[name] in choices, f"{name} 必须是 {'/'.join(choices)} 之一，得到 {values[name]!r}")
    need(values["image_size"] >= 8, "data.image_size 必须 >= 8")
    need(len(values["split_ratios"]) == 3 and abs(sum(values["split_ratios"]) - 1.0) < 1e-6,
         "data.split_ratios 必须是三个和为 1 的数")
    need(values["category_cap"] >= 1, "data.category_cap 必须 >= 1")
    for name in ("latent_dim", "texture_hidden", "hyper_hidden", "hyper_layers", "march_steps",
                 "controller_hidden", "grid_resolution", "surface_points", "icp_iters", "eval_workers",
                 "adversarial_every", "checkpoint_every"):
        need(values[name] >= 1, f"{name} 必须 >= 1")
    need(values["pe_freqs"] >= 0, "model.pe_freqs 必须 >= 0")
    need(len(values["shape_hidden"]) >= 1 and all(w > 0 for w in values["shape_hidden"]),
         "model.shape_hidden 必须是正整数列表")
    need(values["max_step"] > 0, "render.max_step 必须 > 0")
    need(values["fov_deg"] > 0 and values["fov_deg"] < 180, "render.fov_deg 必须在 (0, 180) 内")
    need(values["camera_distance"] > 1.0, "render.camera_distance 必须大于物体半径 (1.0)")
    need(values["alpha_scale"] > 0, "render.alpha_scale 必须 > 0")
    need(values["azimuth_lo"] <= values["azimuth_hi"], "prior.azimuth_lo 必须 <= azimuth_hi")
    need(values["elevation_lo"] <= values["elevation_hi"], "prior.elevation_lo 必须 <= elevation_hi")
    need(values["tilt_lo"] <= values["tilt_hi"], "prior.tilt_lo 必须 <= tilt_hi")
    need(values["elevation_std"] >= 0 and values["tilt_std"] >= 0, "prior 中的标准差必须 >= 0")
    for name in ("lambda_gan", "lambda_cam", "lambda_sdf", "soft_iou", "r1_gamma",
                 "eikonal_weight", "outside_weight", "inside_weight", "outside_margin"):
        need(values[name] >= 0, f"loss.{name} 必须 >= 0")
    need(values["temperature"] > 0, "loss.temperature 必须 > 0")
    if values["lambda_metric"] is None:
        if require_training:
            lo, hi = LAMBDA_METRIC_RANGE
            errors.append(
                f"loss.lambda_metric 未设置: 请按数据集给出 λ1，常用取值范围 {lo}–{hi} "
                "(ShapeNet-13 为 0.05，ShapeNet-55/Pix3D 为 0.1，Pascal3D+ 为 0.03)；消融实验可设为 0"
            )
    else:
        need(values["lambda_metric"] >= 0, "loss.lambda_metric 必须 >= 0")
    need(values["batch_size"] >= 1, f"trainer.batch_size 必须 >= 1，得到 {values['batch_size']}")
    need(values["learning_rate"] > 0, "trainer.learning_rate 必须 > 0")
    need(0 <= values["adam_beta1"] < 1 and 0 <= values["adam_beta2"] < 1, "Adam β 必须在 [0, 1) 内")
    need(values["epochs"] >= 0, "trainer.epochs 必须 >= 0")
    need(values["pretrain_iters"] >= 0, "trainer.pretrain_iters 必须 >= 0")
    need(values["pretrain_radius"] > 0, "trainer.pretrain_radius 必须 > 0")
    need(0.0 <= values["multi_view_fraction"] <= 1.0, "trainer.multi_view_fraction 必须在 [0, 1] 内")
    need(values["multi_view_fraction"] == 0.0 or values["camera_supervised"],
         "trainer.multi_view_fraction > 0 需要 trainer.camera_supervised = true")
    need(values["num_workers"] >= 0, "trainer.num_workers 必须 >= 0")
    need(all(t > 0 for t in values["thresholds"]), "eval.thresholds 必须全部 > 0")
    return errors


def validate_config(source=None, overrides=(), environ=None, require_training=False):
    """
    解析并校验配置，一次性收集所有错误。
    :param source: 配置文件路径、已解析的 {section: {...}} 字典，或 None
    :param overrides: --set 传入的 "key=value" 列表
    :param environ: 环境变量映射，默认 os.environ
    :param require_training: 为 True 时要求 loss.lambda_metric 必须给出
    :return: (TrainConfig 或 None, 错误列表)
    """
    errors = []
    table = {}
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.is_file():
            errors.append(f"配置文件不存在: {path}")
        else:
            try:
                table = tomllib.loads(path.read_text(encoding="utf-8"))
            except tomllib.TOMLDecodeError as e:
                errors.append(f"配置文件解析失败 ({path}): {e}")
    elif isinstance(source, dict):
        table = source

    known = config_fields()
    layered = {}
    layered.update(env_overrides(environ))
    layered.update(flatten_sections(table, errors))
    layered.update(parse_set_overrides(overrides, errors))

    values = {f.name: f.default for f in known.values()}
    failed = set()
    for key, raw in layered.items():
        if key not in known:
            errors.append(f"未知配置键: {key}")
            continue
        f = known[key]
        try:
            values[f.name] = _coerce(raw, f.type)
        except TypeError as e:
            failed.add(f.name)
            errors.append(f"{key}: {e}")

    # 类型错误的键保留默认值参与范围检查，只丢掉它自己的范围报错
    errors.extend(message for message in _check_ranges(values, require_training)
                  if not any(name in message for name in failed))
    if errors:
        return None, errors
    return TrainConfig(**values), []


def load_config(source=None, overrides=(), environ=None, require_training=False):
    """与 validate_config 相同，但在有错误时抛出 ConfigError。"""
    config, errors = validate_config(source, overrides, environ, require_training)
    if errors:
        raise ConfigError(errors)
    return config


def config_to_sections(config):
    """把 TrainConfig 转成 {section: {key: value}}，用于写入 RunManifest 和 checkpoint。"""
    nested = {section: {} for section in SECTIONS}
    flat = asdict(config)
    for f in fields(TrainConfig):
        value = flat[f.name]
        nested[f.metadata["section"]][f.name] = list(value) if isinstance(value, tuple) else value
    return nested


def config_from_sections(nested):
    """config_to_sections 的逆过程，用于从 checkpoint 恢复配置。"""
    config, errors = validate_config({k: {n: v for n, v in body.items() if v is not None}
                                      for k, body in nested.items()}, environ={})
    if errors:
        raise ConfigError(errors)
    return config
