"""Segmentation metrics, histogram KL between parameter / statistic populations, PCA curves of
encoder features and noise-detection quality of the selection masks."""
import csv
import logging
from collections import OrderedDict
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Sequence
import numpy as np
from sklearn.decomposition import PCA
from nlss.utils import exporter, Offsets, DataError
from nlss.confusion import ConfusionMatrix
from nlss.tensor import Tensor
from nlss.layers import Module


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

HIST_EPS = 1e-10


@export
class MetricsReport(NamedTuple):
    oa: float
    aa: float
    miou: float
    mf1: float
    recall: np.ndarray
    iou: np.ndarray
    f1: np.ndarray
    flags: FrozenSet[str] = frozenset()

    def as_dict(self) -> Dict[str, float]:
        return {"oa": self.oa, "aa": self.aa, "miou": self.miou, "mf1": self.mf1}

    def save(self, outfile: str):
        """Write `metric,value` rows: the four summaries, then the per-class vectors"""
        with open(outfile, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            for k, v in self.as_dict().items():
                w.writerow([k, f"{v:.6f}"])
            for name in ("recall", "iou", "f1"):
                for c, v in enumerate(getattr(self, name)):
                    w.writerow([f"{name}_{c}", f"{v:.6f}"])


@export
def report_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    flags = frozenset()
    if cm.get_total() == 0:
        logger.warning("metrics: no labeled pixels, reporting zeros")
        flags = frozenset({"empty"})
    m = cm.get_all_metrics()
    return MetricsReport(
        m["oa"], m["aa"], m["miou"], m["mf1"], cm.get_recall(), cm.get_class_iou(), cm.get_class_f(), flags
    )


@export
def metrics(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> MetricsReport:
    """OA, AA, mIoU and mF1 of a predicted label map against the truth (unlabeled truth pixels skipped)

    :param pred: Predicted classes, any shape
    :param truth: True classes, same shape, may hold the unlabeled sentinel
    :param num_classes: C
    :return: A `MetricsReport`, flagged `empty` when the truth has no labeled pixel
    """
    cm = ConfusionMatrix(num_classes)
    cm.add_maps(truth, pred)
    return report_from_confusion(cm)


@export
def evaluate_model(model, x: np.ndarray, truth: np.ndarray, num_classes: int, d: Optional[int] = None) -> MetricsReport:
    """Predict in eval mode and score against clean labels"""
    from nlss.models import predict

    return metrics(predict(model, x, d), truth, num_classes)


@export
def hist_kl(a: np.ndarray, b: np.ndarray, bins: int = 100, eps: float = HIST_EPS) -> float:
    """KL divergence between the histograms of two samples over their shared range

    Both histograms use the same `bins` even bins over the combined range; every bin gets `eps`
    added before normalizing.  A combined sample without spread has divergence 0.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise DataError("hist_kl needs two non-empty samples")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, bins=edges)[0] / a.size + eps
    q = np.histogram(b, bins=edges)[0] / b.size + eps
    p /= p.sum()
    q /= q.sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


@export
def kl_display(kl):
    """`-1 / log(KL)`, which spreads out small divergences; 0 for identical populations"""
    kl = np.asarray(kl, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = -1.0 / np.log(kl)
    return float(out) if out.ndim == 0 else out


@export
def moving_average(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing mean over `window` values; the first entries average what is available"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values
    csum = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, values.size + 1)
    start = np.maximum(idx - window, 0)
    return (csum[idx] - csum[start]) / (idx - start)


@export
class PCACurve(NamedTuple):
    values: np.ndarray
    flags: FrozenSet[str] = frozenset()


@export
def pca_accumulated_variance(features: np.ndarray) -> PCACurve:
    """Cumulative explained-variance ratio of the principal components of a set of vectors

    :param features: `[n, dim]`, n >= 2
    :return: A nondecreasing curve of length `min(n, dim)` ending at 1, all ones (flagged `rank0`)
        when the vectors have no spread
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2 or features.shape[1] < 1:
        raise DataError(f"need at least two vectors of dimension >= 1, got shape {features.shape}")
    k = min(features.shape)
    if features.var(axis=0).sum() <= 1e-300:
        logger.warning("pca: features have zero variance")
        return PCACurve(np.ones(k), frozenset({"rank0"}))
    pca = PCA(n_components=k, svd_solver="full").fit(features)
    curve = np.minimum(np.cumsum(pca.explained_variance_ratio_), 1.0)
    curve[-1] = 1.0
    return PCACurve(curve)


@export
def feature_vectors(feature: np.ndarray, max_samples: Optional[int] = None, rng=None) -> np.ndarray:
    """Pixels of a `[B, C, H, W]` feature map as `[B * H * W, C]` samples, optionally subsampled"""
    feature = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    vectors = feature.transpose(0, 2, 3, 1).reshape(-1, feature.shape[1])
    if max_samples is not None and vectors.shape[0] > max_samples:
        rng = rng if rng is not None else np.random.default_rng(0)
        vectors = vectors[np.sort(rng.choice(vectors.shape[0], max_samples, replace=False))]
    return vectors


@export
def stage_pca(model, d: int, x: np.ndarray, max_samples: int = 4096) -> List[PCACurve]:
    """PCA curve of every encoder stage of modality d, computed in eval mode"""
    was_training = model.training
    model.eval()
    features = model.encoder_features(d, Tensor(x))
    model.train(was_training)
    return [pca_accumulated_variance(feature_vectors(f, max_samples)) for f in features]


def _kernel_groups(model: Module) -> "OrderedDict[str, np.ndarray]":
    groups = OrderedDict()
    for name, p in model.named_parameters():
        if p.ndim == 4:
            groups[name.rsplit("/", 1)[0]] = p.data
    return groups


@export
def weight_kl(model_a: Module, model_b: Module, bins: int = 100) -> "OrderedDict[str, float]":
    """Per-layer histogram KL between the convolution kernels of two models with the same layout"""
    a, b = _kernel_groups(model_a), _kernel_groups(model_b)
    out = OrderedDict()
    for name, wa in a.items():
        if name in b:
            out[name] = hist_kl(wa, b[name], bins)
    return out


@export
def bn_statistics_kl(stats_a: Dict, stats_b: Dict, bins: int = 100) -> "OrderedDict[str, Dict[str, float]]":
    """Histogram KL of batch-norm running means and standard deviations, per layer and over all layers

    :param stats_a: `{layer: (running_mean, running_var)}` as returned by `ModelPair.bn_stats`
    :param stats_b: The same for the other model
    :return: `{layer: {"mean": kl, "std": kl}}` with an extra `all` entry
    """
    out = OrderedDict()
    pooled = {"a_mean": [], "b_mean": [], "a_std": [], "b_std": []}
    for name, (mean_a, var_a) in stats_a.items():
        if name not in stats_b:
            continue
        mean_b, var_b = stats_b[name]
        out[name] = {"mean": hist_kl(mean_a, mean_b, bins), "std": hist_kl(np.sqrt(var_a), np.sqrt(var_b), bins)}
        pooled["a_mean"].append(mean_a)
        pooled["b_mean"].append(mean_b)
        pooled["a_std"].append(np.sqrt(var_a))
        pooled["b_std"].append(np.sqrt(var_b))
    if out:
        cat = {k: np.concatenate(v) for k, v in pooled.items()}
        out["all"] = {
            "mean": hist_kl(cat["a_mean"], cat["b_mean"], bins),
            "std": hist_kl(cat["a_std"], cat["b_std"], bins),
        }
    return out


@export
class NoiseDetection(NamedTuple):
    precision: float
    recall: float
    flagged: int
    noisy: int
    labeled: int


@export
def noise_detection_report(W_l: np.ndarray, clean: np.ndarray, noisy: np.ndarray) -> NoiseDetection:
    """How well `W_l < 1` singles out the pixels whose noisy label differs from the clean one

    Precision is NaN when nothing is flagged, recall is NaN when nothing is noisy.
    """
    W_l = W_l.values if hasattr(W_l, "values") else np.asarray(W_l)
    clean = np.asarray(clean)
    noisy = np.asarray(noisy)
    if not (W_l.shape == clean.shape == noisy.shape):
        raise DataError(f"shapes differ: weights {W_l.shape}, clean {clean.shape}, noisy {noisy.shape}")
    labeled = noisy != Offsets.UNLABELED
    flagged = (W_l < 1.0) & labeled
    wrong = (noisy != clean) & labeled
    hits = int(np.sum(flagged & wrong))
    num_flagged = int(flagged.sum())
    num_wrong = int(wrong.sum())
    precision = hits / num_flagged if num_flagged else float("nan")
    recall = hits / num_wrong if num_wrong else float("nan")
    return NoiseDetection(precision, recall, num_flagged, num_wrong, int(labeled.sum()))


@export
def save_curve(outfile: str, x_name: str, y_name: str, x: Sequence, y: Sequence):
    """Two-column CSV for external plotting"""
    with open(outfile, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([x_name, y_name])
        for xi, yi in zip(x, y):
            w.writerow([xi, f"{float(yi):.8g}"])
