import filelock
import json
import os

import pandas as pd

from .datasets import write_labels
from .model import save_checkpoint

LOSS_COLUMNS = ["phase", "epoch", "rec", "ebm", "caa", "total"]


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


class RunWriter:
    """
    Writes the artifacts of one run to a flat directory.
    """

    def __init__(self, dir):
        self.dir = dir
        os.makedirs(dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.dir, name)

    @property
    def checkpoint_path(self):
        return self.path("checkpoint.dhia")

    @property
    def state_path(self):
        return self.path("state.pt")

    def write_run(self, command, config, data=None, **extra):
        """
        run.json holds everything needed to repeat the run; it is accepted
        back by --config.
        """
        record = {"command": command, "config": config} | extra
        if data is not None:
            record["data"] = data
        _write_json(self.path("run.json"), record)

    def write_losses(self, pretrain_history, history):
        # Epochs are numbered globally so both phases share one axis.
        rows = [
            {"phase": "pretrain", "epoch": e, "rec": rec, "ebm": 0.0, "caa": 0.0, "total": rec}
            for e, rec in enumerate(pretrain_history)
        ]
        offset = len(pretrain_history)
        rows += [
            {"phase": "finetune", "epoch": offset + e} | {c: h[c] for c in LOSS_COLUMNS[2:]}
            for e, h in enumerate(history)
        ]
        pd.DataFrame(rows, columns=LOSS_COLUMNS).to_csv(self.path("losses.csv"), index=False)

    def write_labels(self, labels):
        write_labels(self.path("labels.txt"), labels)

    def write_metrics(self, report):
        _write_json(self.path("metrics.json"), report.to_dict())

    def write_checkpoint(self, bundle):
        save_checkpoint(bundle, self.checkpoint_path)

    def write_debug(self, records):
        with open(self.path("imputation_debug.jsonl"), "w") as f:
            for record in records:
                f.write(json.dumps(record) + "\n")

    def write_sweep(self, records):
        frame = pd.DataFrame(records, columns=["alpha", "beta", "acc", "nmi", "pur"])
        frame.sort_values(["alpha", "beta"]).to_csv(self.path("sweep.csv"), index=False)

    def write_embeddings(self, completed, projection, labels, predicted):
        for v, h in enumerate(completed):
            pd.DataFrame(h).to_csv(self.path(f"embeddings_view_{v}.csv"), header=False, index=False)
        frame = pd.DataFrame(projection, columns=[f"pc{i + 1}" for i in range(projection.shape[1])])
        frame["label"] = labels
        frame["predicted"] = predicted
        frame.to_csv(self.path("projection.csv"), index=False)


class SweepIndexWriter:
    """
    Appends one JSON line per finished sweep cell to index.jsonl. Cells run in
    separate processes, so appends go through a lock file.
    """

    def __init__(self, dir):
        self.dir = dir
        self._index_path = os.path.join(dir, "index.jsonl")
        self._index_lock = os.path.join(dir, "index.lock")
        self._metadata = None

    def write_metadata(self, md):
        lock = filelock.FileLock(self._index_lock)
        with lock, open(self._index_path, "a") as md_file:
            md_file.write(json.dumps(md) + "\n")

    def get_metadata(self):
        if self._metadata is not None:
            return self._metadata

        with open(self._index_path, "r") as file:
            self._metadata = [json.loads(line) for line in file if line.strip()]
            return self._metadata
