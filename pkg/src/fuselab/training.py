"""Set construction, the optimization loop and evaluation harnesses."""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import msfnet
from .autodiff import grad
from .errors import SetConstructionError
from .image_core import ExposureStack, SceneSets, make_scene_sets, to_luminance
from .mef_ssim import LossConfig, LossTarget, build_target, evaluate_losses, target_index, tensor_losses
from .msfnet import NetConfig, NetParams
from .pyramid import mertens_fuse

RATIO_TOLERANCE = 0.05
CLIP_LOW, CLIP_HIGH = 0.02, 0.98

# Ablation reference values, reported for context only.
REFERENCE_ABLATION = {(True, False): 0.9460, (False, True): 0.9452, (True, True): 0.9468}


# -- set construction ---------------------------------------------------------

def _ratio_ok(ratio: float, target: float) -> bool:
    return abs(ratio / target - 1.0) <= RATIO_TOLERANCE


def make_case1_sets(stack: ExposureStack) -> SceneSets:
    """Interpolation: fuse the pair at ratio 64, measure with the 8x middle too.

    The first index triple in lexicographic order is used.
    """
    t = stack.times
    for i, j, k in itertools.combinations(range(len(t)), 3):
        if _ratio_ok(t[j] / t[i], 8.0) and _ratio_ok(t[k] / t[i], 64.0):
            return make_scene_sets(stack, (i, k), (i, j, k))
    raise SetConstructionError(
        f"scene {stack.name or '<unnamed>'}: no exposures at ratios 1:8:64 (within "
        f"{RATIO_TOLERANCE:.0%}) among times {list(t)}")


def make_case2_sets(stack: ExposureStack) -> SceneSets:
    """Extrapolation: fuse three exposures around the median, measure five."""
    k = len(stack)
    if k < 5:
        raise SetConstructionError(f"scene {stack.name or '<unnamed>'}: case 2 needs >= 5 exposures, got {k}")
    mid = (k - 1) // 2
    return make_scene_sets(stack, (mid - 1, mid, mid + 1), tuple(range(mid - 2, mid + 3)))


def make_sets(stack: ExposureStack, case: int, decouple: bool = True) -> SceneSets:
    """Case 1 or 2 sets; with ``decouple=False`` the measurement set equals the fusion set."""
    if case == 1:
        sets = make_case1_sets(stack)
    elif case == 2:
        sets = make_case2_sets(stack)
    else:
        raise SetConstructionError(f"case must be 1 or 2, got {case}")
    if not decouple:
        sets = make_scene_sets(stack, sets.fuse_idx, sets.fuse_idx)
    return sets


# -- schedule and optimizer -----------------------------------------------------

def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class Adam:
    """Bias-corrected Adam over a dict of named arrays."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """Update ``params`` (name -> ndarray) in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(params: dict, grads: dict, state: Adam, lr: float) -> None:
    state.step(params, grads, lr)


# -- training -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr0: float = 1e-4
    batch: int = 1
    seed: int = 0
    case: int = 1
    decouple: bool = True
    crop: int = 64
    net: NetConfig = NetConfig()
    loss: LossConfig = LossConfig()
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.case not in (1, 2):
            raise ValueError(f"case must be 1 or 2, got {self.case}")
        if self.crop < 2 ** (self.net.levels - 1) or self.crop < 8:
            raise ValueError(f"crop {self.crop} too small for {self.net.levels} levels")

    def net_config(self) -> NetConfig:
        n_inputs = 2 if self.case == 1 else 3
        return replace(self.net, n_inputs=n_inputs)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    total: float
    loss_s: float
    loss_w: float
    val_score: float | None
    seconds: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    steps: int = 0

    @property
    def totals(self) -> list:
        return [r.total for r in self.records]

    @property
    def lrs(self) -> list:
        return [r.lr for r in self.records]

    def to_csv(self, with_timing: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        head = ["epoch", "lr", "total", "loss_s", "loss_w", "val_mef_ssim"]
        writer.writerow(head + (["seconds"] if with_timing else []))
        for r in self.records:
            row = [r.epoch, repr(r.lr), repr(r.total), repr(r.loss_s), repr(r.loss_w),
                   "" if r.val_score is None else repr(r.val_score)]
            writer.writerow(row + ([f"{r.seconds:.3f}"] if with_timing else []))
        return buf.getvalue()


@dataclass
class Scene:
    """A scene prepared for the network: sets, input images and loss reference."""

    sets: SceneSets
    target: LossTarget

    @property
    def name(self) -> str:
        return self.sets.stack.name

    @property
    def inputs(self) -> list:
        return self.sets.fuse_images


def _crop_stack(stack: ExposureStack, top: int, left: int, size: int) -> ExposureStack:
    sl = (slice(top, top + size), slice(left, left + size))
    regions = None if stack.regions is None else stack.regions[sl]
    return ExposureStack(tuple(im[sl] for im in stack.images), stack.times, stack.name, regions)


def prepare_scene(stack: ExposureStack, case: int, loss_cfg: LossConfig, decouple: bool = True) -> Scene:
    sets = make_sets(stack, case, decouple)
    return Scene(sets, build_target(sets.measure_images, loss_cfg))


def prepare_dataset(dataset, cfg: TrainConfig) -> list:
    scenes = []
    for i, stack in enumerate(dataset):
        try:
            scenes.append(prepare_scene(stack, cfg.case, cfg.loss, cfg.decouple))
        except SetConstructionError as exc:
            raise SetConstructionError(f"scene #{i} ({stack.name or 'unnamed'}): {exc}") from exc
    return scenes


def scale_targets(scene: Scene, cfg: LossConfig, levels: int) -> list:
    """Loss references for every network scale, coarse to fine (deep supervision)."""
    from .autodiff.resample import resize_plane

    h, w = scene.target.shape
    out = []
    for lvl in range(levels):
        f = 2 ** (levels - 1 - lvl)
        size = (-(-h // f), -(-w // f))
        imgs = [np.stack([np.clip(resize_plane(im[:, :, c], size), 0.0, 1.0) for c in range(3)], axis=2)
                for im in scene.sets.measure_images]
        out.append(build_target(imgs, cfg) if f > 1 else scene.target)
    return out


def scene_loss(scene: Scene, params: NetParams, deep_targets=None):
    """Forward pass plus loss tensors ``(total, loss_s, loss_w)``."""
    out = msfnet.forward(scene.inputs, params)
    total, ls, lw = tensor_losses(scene.target, out.fused)
    if params.cfg.deep_supervision and deep_targets:
        terms = [tensor_losses(t, z) for t, z in zip(deep_targets[:-1], out.scales[:-1])]
        n = len(terms) + 1
        for t_total, t_s, t_w in terms:
            total, ls, lw = total + t_total, ls + t_s, lw + t_w
        total, ls, lw = total * (1.0 / n), ls * (1.0 / n), lw * (1.0 / n)
    return total, ls, lw


def _maybe_crop(stack: ExposureStack, size: int, rng) -> ExposureStack:
    h, w = stack.shape
    if size >= h and size >= w:
        return stack
    top = int(rng.integers(0, h - size + 1)) if h > size else 0
    left = int(rng.integers(0, w - size + 1)) if w > size else 0
    return _crop_stack(stack, top, left, min(size, h, w))


def train(dataset, cfg: TrainConfig = TrainConfig(), val=None, progress=None, params: NetParams | None = None):
    """Minimize the combined loss over ``dataset`` (a list of exposure stacks).

    Returns ``(params, report)``.  Everything random (init, shuffling, crops)
    derives from ``cfg.seed``, so two calls with the same inputs produce
    bit-identical parameters.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    scenes = prepare_dataset(dataset, cfg)
    val_scenes = prepare_dataset(val, cfg) if val else []
    net_cfg = cfg.net_config()
    if params is None:
        params = msfnet.init_params(net_cfg, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    adam = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    report = TrainReport()
    needs_crop = any(max(s.target.shape) > cfg.crop for s in scenes)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        order = rng.permutation(len(scenes))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch):
            batch = order[start:start + cfg.batch]
            grads = None
            for idx in batch:
                scene = scenes[idx]
                if needs_crop:
                    scene = prepare_scene(_maybe_crop(dataset[idx], cfg.crop, rng), cfg.case, cfg.loss, cfg.decouple)
                deep = scale_targets(scene, cfg.loss, net_cfg.levels) if net_cfg.deep_supervision else None
                total, ls, lw = scene_loss(scene, params, deep)
                sums += (total.item(), ls.item(), lw.item())
                # coarse heads only receive gradient under deep supervision
                g = dict(zip(params.tensors, grad(total, list(params.tensors.values()))))
                grads = g if grads is None else {k: grads[k] + g[k] for k in g}
            if len(batch) > 1:
                grads = {k: v / len(batch) for k, v in grads.items()}
            adam.step(params.arrays(), grads, lr)
            report.steps += 1
        means = sums / len(scenes)
        val_score = None
        if val_scenes:
            val_score = float(np.mean([target_index(s.target, msfnet.fuse(s.inputs, params)) for s in val_scenes]))
        rec = EpochRecord(epoch + 1, lr, float(means[0]), float(means[1]), float(means[2]),
                          val_score, time.perf_counter() - t0)
        report.records.append(rec)
        if progress is not None:
            progress(rec)
    return params, report


def split_corpus(corpus, seed: int, fractions=(0.8, 0.1, 0.1)):
    """Seeded train/val/test split."""
    n = len(corpus)
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    pick = lambda idx: [corpus[i] for i in sorted(idx)]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalRow:
    scene: str
    net: float
    mertens: float


@dataclass
class EvalTable:
    rows: list

    @property
    def mean_net(self) -> float:
        return float(np.mean([r.net for r in self.rows]))

    @property
    def mean_mertens(self) -> float:
        return float(np.mean([r.mertens for r in self.rows]))

    def all_rows(self) -> list:
        return self.rows + [EvalRow("mean", self.mean_net, self.mean_mertens)]

    def to_text(self) -> str:
        width = max(8, *(len(r.scene) for r in self.all_rows()))
        lines = [f"{'scene':<{width}}  {'net':>8}  {'mertens':>8}"]
        lines += [f"{r.scene:<{width}}  {r.net:8.4f}  {r.mertens:8.4f}" for r in self.all_rows()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scene", "net_mef_ssim", "mertens_mef_ssim"])
        for r in self.all_rows():
            writer.writerow([r.scene, repr(r.net), repr(r.mertens)])
        return buf.getvalue()


def evaluate(dataset, params: NetParams, cfg: TrainConfig = TrainConfig()) -> EvalTable:
    """Score the network and the pyramid baseline over each scene's measurement set."""
    rows = []
    for scene in prepare_dataset(dataset, cfg):
        net_score = target_index(scene.target, msfnet.fuse(scene.inputs, params))
        base_score = target_index(scene.target, mertens_fuse(scene.sets))
        rows.append(EvalRow(scene.name or f"scene{len(rows)}", net_score, base_score))
    return EvalTable(rows)


def scene_losses(scene: Scene, fused):
    return evaluate_losses(scene.target, fused)


# -- brightness order -------------------------------------------------------------

@dataclass
class PairResult:
    a: int
    b: int
    brighter: int
    preserved: bool
    fused_a: float
    fused_b: float


@dataclass
class OrderReport:
    pairs: list
    skipped: int

    @property
    def evaluated(self) -> int:
        return len(self.pairs)

    @property
    def preserved_fraction(self) -> float:
        if not self.pairs:
            return float("nan")
        return sum(p.preserved for p in self.pairs) / len(self.pairs)

    @property
    def reversals(self) -> list:
        return [p for p in self.pairs if not p.preserved]


def region_means(img: np.ndarray, regions: np.ndarray, labels) -> dict:
    y = to_luminance(img)
    return {lab: float(y[regions == lab].mean()) for lab in labels}


def brightness_order_report(sets: SceneSets, fused: np.ndarray, regions: np.ndarray | None = None) -> OrderReport:
    """Check that region pairs keep the brightness order shared by every fused input.

    A pair is evaluated only when, in every input of the fusion set, neither
    region's mean luminance is clipped and the order between them agrees.
    """
    if regions is None:
        regions = sets.stack.regions
    if regions is None:
        raise ValueError("no region labels available")
    regions = np.asarray(regions)
    if regions.shape != sets.stack.shape or regions.shape != fused.shape[:2]:
        raise ValueError("region map does not match image size")
    labels = [int(v) for v in np.unique(regions)]
    if len(labels) < 2:
        raise ValueError("need at least two regions")
    per_input = [region_means(img, regions, labels) for img in sets.fuse_images]
    fused_means = region_means(fused, regions, labels)
    pairs, skipped = [], 0
    for a, b in itertools.combinations(labels, 2):
        clipped = any(not (CLIP_LOW <= m[x] <= CLIP_HIGH) for m in per_input for x in (a, b))
        signs = {np.sign(m[a] - m[b]) for m in per_input}
        if clipped or len(signs) != 1 or 0 in signs:
            skipped += 1
            continue
        brighter = a if signs.pop() > 0 else b
        darker = b if brighter == a else a
        pairs.append(PairResult(a, b, brighter, fused_means[brighter] > fused_means[darker],
                                fused_means[a], fused_means[b]))
    return OrderReport(pairs, skipped)


# -- ablation ---------------------------------------------------------------------

@dataclass
class AblationCell:
    multiscale: bool
    use_lw: bool
    score: float

    @property
    def reference(self):
        return REFERENCE_ABLATION.get((self.multiscale, self.use_lw))


def ablation_configs(cfg: TrainConfig) -> dict:
    """The four (multi-scale, L_W) variants of ``cfg``."""
    out = {}
    for multiscale, use_lw in itertools.product((True, False), (True, False)):
        net = replace(cfg.net, levels=cfg.net.levels if multiscale else 1, half_branch=multiscale)
        loss = replace(cfg.loss, lam=cfg.loss.lam if use_lw else 0.0)
        out[(multiscale, use_lw)] = replace(cfg, net=net, loss=loss)
    return out


def run_ablation(train_set, val_set, cfg: TrainConfig = TrainConfig(), trained: dict | None = None,
                 progress=None) -> list:
    """Train each variant (unless supplied in ``trained``) and score on ``val_set``.

    Scores always use the full loss configuration of ``cfg`` so the cells are
    comparable.
    """
    trained = dict(trained or {})
    cells = []
    for key, variant in ablation_configs(cfg).items():
        params = trained.get(key)
        if params is None:
            params, _ = train(train_set, variant, progress=progress)
        table = evaluate(val_set, params, cfg)
        cells.append(AblationCell(key[0], key[1], table.mean_net))
    return cells


def ablation_text(cells) -> str:
    yn = lambda v: "Y" if v else "N"  # noqa: E731
    lines = ["multi-scale  L_W  MEF-SSIM  reference (not comparable - different dataset)"]
    for c in cells:
        ref = "n/a" if c.reference is None else f"{c.reference:.4f}"
        lines.append(f"{yn(c.multiscale):>11}  {yn(c.use_lw):>3}  {c.score:8.4f}  {ref}")
    full = next(c for c in cells if c.multiscale and c.use_lw)
    for c in cells:
        if c is not full:
            delta = full.score - c.score
            lines.append(f"delta full - (ms={yn(c.multiscale)}, L_W={yn(c.use_lw)}): {delta:+.4f}")
    return "\n".join(lines) + "\n"


def ablation_csv(cells) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["multiscale", "l_w", "mef_ssim", "reference_not_comparable_different_dataset"])
    for c in cells:
        writer.writerow([int(c.multiscale), int(c.use_lw), repr(c.score),
                         "" if c.reference is None else c.reference])
    return buf.getvalue()


# -- end-to-end gradient check ------------------------------------------------------

def network_grad_check(seed: int = 0, size: int = 16, per_tensor: int = 4, eps: float = 1e-6,
                       net: NetConfig = NetConfig(), loss: LossConfig = LossConfig(),
                       rel_floor: float = 1e-4, samples: int | None = None) -> dict:
    """Backprop vs central differences for sampled entries of every parameter.

    Runs the full network and combined loss on a small synthetic Case 1
    scene.  The error of a tensor is ``max|a - n| / max(|a|, |n|, floor)``
    over its sampled entries, where ``floor`` is ``rel_floor`` times the
    largest gradient anywhere in the network.  Tensors whose gradients sit
    below finite-difference resolution then do not report rounding noise as
    error.  Returns the error per parameter tensor.  With ``samples`` set,
    that many entries are drawn uniformly from the whole parameter vector
    instead of ``per_tensor`` from each tensor, and only tensors that were
    hit are reported.
    """
    from .autodiff.gradcheck import numeric_grad
    from .data_synth import center_for_times, make_bracket, synth_radiance

    times = (1.0, 8.0, 64.0)
    stack = make_bracket(synth_radiance(seed, size, center=center_for_times(times)), times)
    scene = prepare_scene(stack, 1, loss)
    params = msfnet.init_params(replace(net, n_inputs=2), seed)
    deep = scale_targets(scene, loss, net.levels) if net.deep_supervision else None

    def f():
        return scene_loss(scene, params, deep)[0]

    names = list(params.tensors)
    analytic = dict(zip(names, grad(f(), [params[n] for n in names])))
    floor = rel_floor * max(np.abs(g).max() for g in analytic.values())
    rng = np.random.default_rng(seed)
    if samples is None:
        picks = {name: rng.choice(params[name].size, size=min(per_tensor, params[name].size), replace=False)
                 for name in names}
    else:
        sizes = np.array([params[n].size for n in names])
        flat = rng.choice(sizes.sum(), size=min(samples, sizes.sum()), replace=False)
        owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        picks = {names[i]: np.sort(flat[owner == i] - starts[i]) for i in np.unique(owner)}
    errors = {}
    for name, coords in picks.items():
        t = params[name]
        numeric = numeric_grad(f, t, eps, coords).reshape(-1)[coords]
        a = analytic[name].reshape(-1)[coords]
        scale = max(np.abs(a).max(), np.abs(numeric).max(), floor)
        errors[name] = float(np.abs(a - numeric).max() / scale)
    return errors
