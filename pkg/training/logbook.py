"""
日志与训练记录。

- setup_logging: 文件日志 <run_dir>/logs/mcsv.log + 经由 tqdm.write 的控制台输出
- LossLog: 每一步的损失分项写入 loss_parts.csv，每个 epoch 的均值追加到 epoch_summary.jsonl
"""
import csv
import json
import logging
import os

import pandas as pd
from tqdm import tqdm

from .config import LOG_DIRNAME, LOG_FILENAME

LOSS_CSV = "loss_parts.csv"
EPOCH_SUMMARY = "epoch_summary.jsonl"
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


class TqdmHandler(logging.Handler):
    """通过 tqdm.write 输出，避免打断进度条。"""

    def emit(self, record):
        try:
            tqdm.write(self.format(record))
        except Exception:
            self.handleError(record)


def setup_logging(run_dir=None, level=logging.INFO):
    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        if getattr(handler, "_mcsv", False):
            root.removeHandler(handler)
            handler.close()

    console = TqdmHandler()
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    handlers = [console]
    if run_dir is not None:
        log_dir = os.path.join(run_dir, LOG_DIRNAME)
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, LOG_FILENAME), encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(file_handler)
    for handler in handlers:
        handler._mcsv = True
        root.addHandler(handler)
    return os.path.join(run_dir, LOG_DIRNAME, LOG_FILENAME) if run_dir else None


class LossLog:
    """逐步记录损失分项，epoch 结束时写出汇总。"""

    def __init__(self, run_dir, resume=False):
        self.csv_path = os.path.join(run_dir, LOSS_CSV)
        self.summary_path = os.path.join(run_dir, EPOCH_SUMMARY)
        os.makedirs(run_dir, exist_ok=True)
        fresh = not (resume and os.path.exists(self.csv_path))
        self._file = open(self.csv_path, "w" if fresh else "a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file)
        if fresh:
            self._writer.writerow(["step", "epoch", "part", "value"])
            if os.path.exists(self.summary_path):
                os.remove(self.summary_path)
        self._rows = []

    def log_step(self, step, epoch, parts):
        for name, value in sorted(parts.items()):
            value = float(value)
            self._writer.writerow([step, epoch, name, repr(value)])
            self._rows.append({"step": step, "epoch": epoch, "part": name, "value": value})
        self._file.flush()

    def end_epoch(self, epoch):
        """把当前 epoch 各分项的均值追加为一行 JSON，并返回该字典。"""
        frame = pd.DataFrame(self._rows, columns=["step", "epoch", "part", "value"])
        frame = frame[frame["epoch"] == epoch]
        means = {part: float(v) for part, v in frame.groupby("part")["value"].mean().items()}
        summary = {"epoch": epoch, "steps": int(frame["step"].nunique()), "mean": means}
        with open(self.summary_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(summary, ensure_ascii=False, sort_keys=True) + "\n")
        self._rows = [r for r in self._rows if r["epoch"] != epoch]
        return summary

    def close(self):
        if not self._file.closed:
            self._file.close()


def read_loss_log(run_dir):
    return pd.read_csv(os.path.join(run_dir, LOSS_CSV))
