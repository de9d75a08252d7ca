import csv
import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Union
import numpy as np
from nlss.utils import exporter, Offsets, DataError


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")


@export
class ConfusionMatrix:
    """Pixel confusion matrix with segmentation metrics

    Rows are the true class, columns the predicted class.  Unlabeled pixels are skipped.  Macro
    averages only run over classes with support: recall (AA) over classes present in the truth,
    IoU and F1 over classes present in the truth or the prediction.
    """

    def __init__(self, labels: Union[int, Sequence[str], Dict[int, str]]):
        """Constructor with input labels

        :param labels: A class count, a dictionary (`k=int,v=str`) or an array of labels
        """
        if isinstance(labels, int):
            self.labels = [str(i) for i in range(labels)]
        elif isinstance(labels, dict):
            self.labels = [labels[i] for i in range(len(labels))]
        else:
            self.labels = list(labels)
        nc = len(self.labels)
        self._cm = np.zeros((nc, nc), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def add(self, truth: int, guess: int):
        self._cm[truth, guess] += 1

    def add_maps(self, truth: np.ndarray, guess: np.ndarray, ignore: int = Offsets.UNLABELED):
        """Accumulate aligned label maps of any shape

        :param truth: True classes, `ignore` marks unlabeled pixels
        :param guess: Predicted classes
        """
        truth = np.asarray(truth).reshape(-1)
        guess = np.asarray(guess).reshape(-1)
        if truth.shape != guess.shape:
            raise DataError(f"prediction and truth are not aligned: {guess.shape} vs {truth.shape}")
        keep = truth != ignore
        truth = truth[keep].astype(np.int64)
        guess = guess[keep].astype(np.int64)
        nc = self.num_classes
        if truth.size and (truth.max() >= nc or guess.max() >= nc or guess.min() < 0):
            raise DataError(f"class ids must lie in [0, {nc})")
        self._cm += np.bincount(truth * nc + guess, minlength=nc * nc).reshape(nc, nc)

    def __iadd__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self._cm += other._cm
        return self

    @property
    def counts(self) -> np.ndarray:
        return self._cm

    def __str__(self):
        values = []
        width = max(8, max(len(x) for x in self.labels) + 1)
        for i, label in enumerate([""] + self.labels):
            values += ["{:>{width}}".format(label, width=width + 1)]
        values += ["\n"]
        for i, label in enumerate(self.labels):
            values += ["{:>{width}}".format(label, width=width + 1)]
            for j in range(len(self.labels)):
                values += ["{:{width}d}".format(self._cm[i, j], width=width + 1)]
            values += ["\n"]
        values += ["\n"]
        return "".join(values)

    def save(self, outfile: str):
        ordered_fieldnames = OrderedDict([("labels", None)] + [(l, None) for l in self.labels])
        with open(outfile, "w", newline="") as f:
            dw = csv.DictWriter(f, delimiter=",", fieldnames=ordered_fieldnames)
            dw.writeheader()
            for index, row in enumerate(self._cm):
                row_dict = {l: row[i] for i, l in enumerate(self.labels)}
                row_dict.update({"labels": self.labels[index]})
                dw.writerow(row_dict)

    def reset(self):
        self._cm *= 0

    def get_correct(self) -> int:
        return int(self._cm.diagonal().sum())

    def get_total(self) -> int:
        return int(self._cm.sum())

    def get_acc(self) -> float:
        """Overall accuracy

        :return: (``float``) accuracy, 0 when nothing was counted
        """
        total = self.get_total()
        return float(self.get_correct()) / total if total else 0.0

    def get_support(self) -> np.ndarray:
        return np.sum(self._cm, axis=1)

    def get_predicted(self) -> np.ndarray:
        return np.sum(self._cm, axis=0)

    def truth_present(self) -> np.ndarray:
        return self.get_support() > 0

    def any_present(self) -> np.ndarray:
        return (self.get_support() + self.get_predicted()) > 0

    def get_recall(self) -> np.ndarray:
        """Per-class recall, 0 for classes absent from the truth"""
        total = self.get_support()
        total = (total == 0) + total
        return np.diag(self._cm) / total.astype(float)

    def get_precision(self) -> np.ndarray:
        total = self.get_predicted()
        total = (total == 0) + total
        return np.diag(self._cm) / total.astype(float)

    def get_class_iou(self) -> np.ndarray:
        tp = np.diag(self._cm).astype(float)
        d = self.get_support() + self.get_predicted() - tp
        return tp / ((d == 0) + d)

    def get_class_f(self) -> np.ndarray:
        tp = np.diag(self._cm).astype(float)
        d = self.get_support() + self.get_predicted()
        return 2 * tp / ((d == 0) + d)

    @staticmethod
    def _masked_mean(values: np.ndarray, mask: np.ndarray) -> float:
        return float(values[mask].mean()) if mask.any() else 0.0

    def get_mean_recall(self) -> float:
        return self._masked_mean(self.get_recall(), self.truth_present())

    def get_mean_iou(self) -> float:
        return self._masked_mean(self.get_class_iou(), self.any_present())

    def get_macro_f(self) -> float:
        return self._masked_mean(self.get_class_f(), self.any_present())

    def get_all_metrics(self) -> Dict[str, float]:
        """Make a map of metrics suitable for reporting, keyed by metric name

        :return: (``dict``) Map of metrics keyed by metric names
        """
        return {
            "oa": self.get_acc(),
            "aa": self.get_mean_recall(),
            "miou": self.get_mean_iou(),
            "mf1": self.get_macro_f(),
        }

    @classmethod
    def create(cls, truth: np.ndarray, guess: np.ndarray, num_classes: Optional[int] = None) -> "ConfusionMatrix":
        """Build a confusion matrix from two label maps

        :param truth: True label map
        :param guess: Predicted label map
        :param num_classes: Class count, by default one more than the largest id seen
        """
        if num_classes is None:
            seen = np.concatenate([np.asarray(truth).reshape(-1), np.asarray(guess).reshape(-1)])
            seen = seen[seen != Offsets.UNLABELED]
            num_classes = int(seen.max()) + 1 if seen.size else 1
        cm = cls(num_classes)
        cm.add_maps(truth, guess)
        return cm
