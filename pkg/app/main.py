"""
mcsv 命令行入口。

子命令: synth-data / train / eval / render / export-mesh / export-embeddings
退出码: 0 成功，1 参数、配置或输入数据预检失败，2 运行时错误 (包括训练或评估途中读到坏数据)。
每次运行都会在 --out 目录下写出一份 run_manifest.json。
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime

import torch

from datakit.loader import decode_image
from datakit.manifest import DatasetManifest
from datakit.synth import generate_primitive_dataset, save_rgba_png
from evalkit.evaluate import (
    check_ground_truth,
    evaluate_model,
    export_embeddings,
    export_mesh,
    nearest_centroid_accuracy,
)
from model.camera import ViewPrior, angles_to_view
from model.fields import LatentCodes
from model.renderer import RenderSettings, render
from training.checkpoint import load_checkpoint, restore_modules
from training.config import RUN_MANIFEST_NAME, config_to_sections, describe_keys, load_config
from training.errors import ConfigError, DatasetError
from training.logbook import setup_logging
from training.trainer import check_dataset, configure_determinism, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """命令行参数错误 (未知参数、缺少必填项等)。"""


class CLIParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict = field(default_factory=dict)
    input_hash: str = ""
    inputs: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""
    outputs: list = field(default_factory=list)
    status: str = "running"
    # preflight: 还在检查配置和输入；running: 检查已通过，开始计算
    stage: str = "preflight"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, RUN_MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, ensure_ascii=False, indent=2, sort_keys=True)
        return path


def hash_inputs(paths):
    """对输入文件内容做 sha256 (目录只取其中的 manifest.json)，类似 git 的内容哈希。"""
    digest = hashlib.sha256()
    for path in sorted(p for p in paths if p):
        target = os.path.join(path, "manifest.json") if os.path.isdir(path) else path
        digest.update(os.path.abspath(path).encode("utf-8"))
        if os.path.isfile(target):
            with open(target, "rb") as f:
                for block in iter(lambda: f.read(1 << 20), b""):
                    digest.update(block)
    return digest.hexdigest()


def _common(sub):
    sub.add_argument("--config", help="TOML 配置文件")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="覆盖单个配置项，例如 --set trainer.epochs=1 (可重复)")
    sub.add_argument("--out", required=True, help="输出目录 (本次运行的所有产物都写在这里)")


def build_parser():
    epilog = "配置项 (section.key):\n" + describe_keys()
    parser = CLIParser(prog="mcsv", description="多类别单视角 3D 形状学习",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=epilog)
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CLIParser)

    def add(name, help_text):
        sub = subparsers.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                                    formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(sub)
        return sub

    synth = add("synth-data", "合成解析几何体数据集")
    synth.add_argument("--categories", default="sphere,box,cylinder", help="逗号分隔的几何体类型")
    synth.add_argument("--per-category", type=int, default=100)
    synth.add_argument("--views-per-object", type=int, default=1)
    synth.add_argument("--image-size", type=int, default=None, help="默认取 data.image_size")
    synth.add_argument("--seed", type=int, default=None, help="默认取 trainer.seed")
    synth.add_argument("--workers", type=int, default=1)

    train_cmd = add("train", "训练模型")
    train_cmd.add_argument("--resume", help="从 checkpoint 继续训练")

    eval_cmd = add("eval", "在某个 split 上评估 checkpoint")
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--split", default="test", choices=("train", "val", "test"))
    eval_cmd.add_argument("--data", help="数据集根目录，默认取 checkpoint 中的 data.dataset_root")

    render_cmd = add("render", "从 checkpoint 渲染 RGBA 图像")
    render_cmd.add_argument("--checkpoint", required=True)
    source = render_cmd.add_mutually_exclusive_group(required=True)
    source.add_argument("--image", help="输入 RGBA 图像")
    source.add_argument("--latent", help="保存了 shape_code / texture_code 的 .pt 文件")
    render_cmd.add_argument("--pose", help="视角 JSON: {\"euler_deg\": [仰角, 方位角, 倾斜角]}")
    render_cmd.add_argument("--elevation", type=float, default=30.0)
    render_cmd.add_argument("--azimuth", type=float, default=0.0)
    render_cmd.add_argument("--tilt", type=float, default=0.0)

    mesh_cmd = add("export-mesh", "从单张图像重建网格并导出 OBJ")
    mesh_cmd.add_argument("--checkpoint", required=True)
    mesh_cmd.add_argument("--image", required=True)

    emb_cmd = add("export-embeddings", "导出形状隐向量 CSV")
    emb_cmd.add_argument("--checkpoint", required=True)
    emb_cmd.add_argument("--split", default="test", choices=("train", "val", "test"))
    emb_cmd.add_argument("--data", help="数据集根目录，默认取 checkpoint 中的 data.dataset_root")
    emb_cmd.add_argument("--reference-split", default="train",
                         help="计算最近类中心准确率时用作参考的 split；设为 none 跳过")
    return parser


def _require_file(path, what):
    if path and not os.path.exists(path):
        raise ConfigError([f"{what} 不存在: {path}"])


def _dataset(args, config, checkpoint=None):
    root = getattr(args, "data", None) or config.dataset_root
    if not root and checkpoint is not None:
        root = checkpoint.train_config().dataset_root
    if not root:
        raise ConfigError(["未指定数据集目录 (--data 或 data.dataset_root)"])
    return DatasetManifest.load(root)


def cmd_synth_data(args, config, run):
    image_size = args.image_size or config.image_size
    seed = config.seed if args.seed is None else args.seed
    categories = [c.strip() for c in args.categories.split(",") if c.strip()]
    run.seeds = {"dataset": seed}
    try:
        manifest = generate_primitive_dataset(
            args.out, categories=categories, per_category=args.per_category,
            views_per_object=args.views_per_object, image_size=image_size, seed=seed,
            prior=ViewPrior.from_config(config), fov_deg=config.fov_deg, camera_distance=config.camera_distance,
            split_ratios=config.split_ratios, workers=args.workers,
        )
    except ValueError as e:
        raise ConfigError([str(e)]) from e
    counts = manifest.per_category_counts
    logger.info(f"数据集已写入 {args.out}: {counts}")
    return [os.path.join(args.out, "manifest.json")]


def cmd_train(args, config, run):
    _require_file(args.resume, "checkpoint")
    run.inputs.append(config.dataset_root)
    run.seeds = {"trainer": config.seed}
    manifest = check_dataset(config)
    run.stage = "running"
    final = train(config, args.out, resume=args.resume, manifest=manifest)
    return [final.path, os.path.join(args.out, "loss_parts.csv"), os.path.join(args.out, "epoch_summary.jsonl")]


def cmd_eval(args, config, run):
    checkpoint = load_checkpoint(args.checkpoint, map_location=config.device)
    manifest = _dataset(args, config, checkpoint)
    run.inputs.append(manifest.root)
    run.seeds = {"eval": config.seed}
    check_ground_truth(manifest, args.split, config.align)
    run.stage = "running"
    report = evaluate_model(checkpoint, manifest, args.split, config.thresholds, config.align,
                            config.grid_resolution, config.surface_points, config.icp_iters,
                            config.eval_workers, config.seed, config.device)
    overall = report.overall()
    logger.info("整体指标: " + ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                       for k, v in overall.items()))
    return list(report.save(args.out))


def _render_pose(args, camera_distance):
    if args.pose:
        _require_file(args.pose, "视角文件")
        with open(args.pose, encoding="utf-8") as f:
            euler = json.load(f)["euler_deg"]
    else:
        euler = [args.elevation, args.azimuth, args.tilt]
    gamma = torch.deg2rad(torch.tensor(euler, dtype=torch.get_default_dtype()))
    return angles_to_view(gamma, camera_distance)


@torch.no_grad()
def cmd_render(args, config, run):
    checkpoint = load_checkpoint(args.checkpoint, map_location=config.device)
    ck_config, model, _ = restore_modules(checkpoint, config.device)
    if args.latent:
        _require_file(args.latent, "隐向量文件")
        payload = torch.load(args.latent, map_location=config.device, weights_only=True)
        codes = LatentCodes(shape=payload["shape_code"].reshape(1, -1), texture=payload["texture_code"].reshape(1, -1))
        params = model.fields(codes)
    else:
        _require_file(args.image, "输入图像")
        _, params = model.infer_fields(decode_image(args.image)[None].to(config.device))

    settings = RenderSettings.from_config(ck_config)
    pose = _render_pose(args, settings.camera_distance)
    out = render(params, pose, model.marcher, settings)
    rgba = torch.cat([out.rgb, out.alpha[..., None]], dim=-1)[0].double().cpu().numpy()
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "render.png")
    save_rgba_png(rgba, path)
    return [path]


def cmd_export_mesh(args, config, run):
    _require_file(args.image, "输入图像")
    name = os.path.splitext(os.path.basename(args.image))[0]
    path = os.path.join(args.out, f"{name}.obj")
    mesh = export_mesh(args.checkpoint, args.image, path, config.grid_resolution, config.device)
    logger.info(f"网格已导出: {path} ({len(mesh.vertices)} 个顶点, {len(mesh.faces)} 个面)")
    return [path]


def cmd_export_embeddings(args, config, run):
    checkpoint = load_checkpoint(args.checkpoint, map_location=config.device)
    manifest = _dataset(args, config, checkpoint)
    run.inputs.append(manifest.root)
    run.stage = "running"
    path = os.path.join(args.out, f"embeddings_{args.split}.csv")
    frame = export_embeddings(checkpoint, manifest, args.split, path, config.device)
    outputs = [path]
    if args.reference_split != "none" and args.reference_split != args.split:
        reference = export_embeddings(checkpoint, manifest, args.reference_split, None, config.device)
        accuracy = nearest_centroid_accuracy(reference, frame)
        logger.info(f"最近类中心分类准确率 ({args.reference_split} -> {args.split}): {accuracy:.4f}")
        summary = os.path.join(args.out, "embedding_summary.json")
        with open(summary, "w", encoding="utf-8") as f:
            json.dump({"reference_split": args.reference_split, "split": args.split,
                       "nearest_centroid_accuracy": accuracy, "count": len(frame)}, f, indent=2)
        outputs.append(summary)
    return outputs


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "export-mesh": cmd_export_mesh,
    "export-embeddings": cmd_export_embeddings,
}


def cli_main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"参数错误: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as e:
        # --help
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION

    setup_logging(args.out)
    run = RunManifest(command=args.command, argv=argv, started_at=datetime.now().isoformat(timespec="seconds"))
    exit_code = EXIT_OK
    try:
        _require_file(args.config, "配置文件")
        config = load_config(args.config, args.set, require_training=args.command == "train")
        run.config = config_to_sections(config)
        configure_determinism(config.strict)
        run.inputs.extend(p for p in (args.config, getattr(args, "checkpoint", None), getattr(args, "resume", None),
                                      getattr(args, "image", None), getattr(args, "latent", None)) if p)
        run.outputs = COMMANDS[args.command](args, config, run)
        run.status = "success"
    except ConfigError as e:
        logger.error(str(e))
        run.status = "invalid"
        exit_code = EXIT_VALIDATION
    except DatasetError as e:
        # 预检阶段的数据问题算校验失败，训练或评估途中读到坏数据算运行时错误
        if run.stage == "preflight":
            logger.error(str(e))
            run.status = "invalid"
            exit_code = EXIT_VALIDATION
        else:
            logger.exception(f"运行失败: {e}")
            run.status = "failed"
            exit_code = EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"运行失败: {e}")
        run.status = "failed"
        exit_code = EXIT_RUNTIME
    finally:
        run.input_hash = hash_inputs(run.inputs)
        run.finished_at = datetime.now().isoformat(timespec="seconds")
        run.write(args.out)
    return exit_code


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
