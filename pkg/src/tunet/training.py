"""Loss, deterministic SGD training loop, checkpointing, and the ablation runner.

Determinism: model init draws from a stream seeded by (seed,); every training
iteration draws batch indices and augmentation parameters from a fresh stream
seeded by (seed, iteration), so the sample order does not depend on when
validation runs.
"""

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from tunet import tensor as T
from tunet.data import (
    PhantomSpec,
    apply_augment,
    draw_augment_params,
    generate_phantom,
    standardize_slice,
)
from tunet.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    IntegrityError,
    NumericError,
    ParseError,
)
from tunet.metrics import evaluate_case_set, mean_foreground_dsc, predict_volume, stack_slices
from tunet.model import PRESETS, Model, ModelConfig
from tunet.tensor import Tensor

CHECKPOINT_MAGIC = "TUCKPT1"


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    iterations: int = 300
    seed: int = 0
    lambda_ce: float = 0.5
    lambda_dice: float = 0.5
    eval_every: int = 100
    augment: bool = True

    def validate(self):
        # lr 0 is allowed: a frozen run is well-defined (and useful in tests)
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.lambda_ce + self.lambda_dice <= 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")
        return self

    def to_flat(self):
        return {f"train.{f.name}": str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_flat(cls, flat):
        kwargs = {}
        for f in fields(cls):
            key = f"train.{f.name}"
            if key not in flat:
                continue
            raw = flat[key]
            if f.type is int:
                kwargs[f.name] = int(raw)
            elif f.type is float:
                kwargs[f.name] = float(raw)
            elif f.type is bool:
                kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def one_hot(labels, num_classes, dtype):
    labels = np.asarray(labels)
    h, w = labels.shape
    out = np.zeros((num_classes, h, w), dtype=dtype)
    yy, xx = np.indices((h, w))
    out[labels, yy, xx] = 1
    return out


def segmentation_loss(logits, labels, lambda_ce=0.5, lambda_dice=0.5, eps=1e-6):
    """lambda_ce * pixel-mean cross-entropy + lambda_dice * (1 - mean soft Dice).

    Soft Dice per class c: (2 * sum(p_c * y_c) + eps) / (sum p_c + sum y_c + eps),
    averaged over all classes including background.
    """
    k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(
            f"labels must lie in [0, {k}), found [{labels.min()}, {labels.max()}]"
        )
    onehot_np = one_hot(labels, k, logits.dtype)
    onehot = Tensor(onehot_np)
    logp = T.log_softmax(logits, axis=0)
    ce = T.scale(T.tsum(T.mul(onehot, logp)), -1.0 / (h * w))
    probs = T.softmax(logits, axis=0)
    inter = T.tsum(T.mul(probs, onehot), axis=(1, 2))
    psum = T.tsum(probs, axis=(1, 2))
    counts = Tensor(onehot_np.sum(axis=(1, 2)))
    eps_t = Tensor(np.full(k, eps))
    dice_vec = T.div(T.add(T.scale(inter, 2.0), eps_t), T.add(T.add(psum, counts), eps_t))
    dice_term = T.sub(Tensor(1.0), T.tmean(dice_vec))
    return T.add(T.scale(ce, lambda_ce), T.scale(dice_term, lambda_dice))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    loss_curve: list = field(default_factory=list)  # (iteration, loss)
    val_curve: list = field(default_factory=list)  # (iteration, mean foreground dsc)


def validation_dsc(model, cases):
    """Mean foreground DSC over (case_id, image, gt) triples, slice by slice."""
    scores = []
    for _, image, gt in cases:
        pred = predict_volume(image, model.predict_slice, gt.spacing, gt.num_classes)
        scores.append(mean_foreground_dsc(pred, gt))
    return float(np.mean(scores))


def slices_foreground_dsc(model, slices, num_classes):
    """Foreground DSC of the model over a list of (image, label) 2D slices."""
    logits = [model.predict_slice(img) for img, _ in slices]
    pred = stack_slices(logits, (1.0, 1.0, 1.0), num_classes)
    gt_vox = np.stack([lab for _, lab in slices]).astype(np.int32)
    from tunet.metrics import LabelVolume

    gt = LabelVolume(gt_vox, (1.0, 1.0, 1.0), num_classes)
    return mean_foreground_dsc(pred, gt)


def train(model, cfg, slices, val_cases=(), out_dir=None):
    """SGD over randomly sampled, optionally augmented 2D slices.

    Emits the loss every iteration and validation DSC every cfg.eval_every
    iterations (and at the end); both go to append-only TSV files when
    out_dir is given. A non-finite loss aborts with the iteration named.
    """
    cfg.validate()
    slices = list(slices)
    if not slices:
        raise ContractError("training needs a non-empty slice set")
    opt = T.SGD(model.parameter_list(), cfg.lr, cfg.momentum, cfg.weight_decay)
    result = TrainResult()
    loss_fh = val_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        loss_fh = open(os.path.join(out_dir, "loss_curve.tsv"), "w", encoding="ascii")
        loss_fh.write("iteration\tloss\n")
        val_fh = open(os.path.join(out_dir, "val_curve.tsv"), "w", encoding="ascii")
        val_fh.write("iteration\tval_dsc\n")
    try:
        for it in range(1, cfg.iterations + 1):
            rng = np.random.default_rng([int(cfg.seed), 1000003, it])
            picks = rng.integers(0, len(slices), size=cfg.batch_size)
            losses = []
            for j in picks:
                img, lab = slices[int(j)]
                if cfg.augment:
                    img, lab = apply_augment(img, lab, draw_augment_params(rng))
                x = standardize_slice(img).astype(T.get_default_dtype())
                logits = model.forward(Tensor(x[None]))
                losses.append(
                    segmentation_loss(logits, lab, cfg.lambda_ce, cfg.lambda_dice)
                )
            total = losses[0]
            for extra in losses[1:]:
                total = T.add(total, extra)
            loss = T.scale(total, 1.0 / len(losses))
            loss_value = float(loss.item())
            if not np.isfinite(loss_value):
                raise NumericError(f"non-finite loss at iteration {it}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            result.loss_curve.append((it, loss_value))
            if loss_fh:
                loss_fh.write(f"{it}\t{loss_value!r}\n")
            due = cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.iterations)
            if val_cases and due:
                dsc = validation_dsc(model, val_cases)
                result.val_curve.append((it, dsc))
                if val_fh:
                    val_fh.write(f"{it}\t{dsc!r}\n")
    finally:
        if loss_fh:
            loss_fh.close()
        if val_fh:
            val_fh.close()
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_TAG_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(path, model, iteration=0, seed=0):
    """Text manifest (config snapshot + named parameter table) followed by the
    raw little-endian payload. save -> load -> save is byte-identical."""
    params = model.parameters()
    lines = [CHECKPOINT_MAGIC, f"iteration {int(iteration)}", f"seed {int(seed)}"]
    for k, v in model.config.to_flat().items():
        lines.append(f"config {k}={v}")
    chunks = []
    offset = 0
    for name, p in params.items():
        tag = "f64" if p.data.dtype.itemsize == 8 else "f32"
        arr = np.ascontiguousarray(p.data.astype(_TAG_DTYPES[tag], copy=False))
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"param {name} {tag} {shape} {offset}")
        blob = arr.tobytes()
        chunks.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\nPAYLOAD\n").encode("ascii"))
        for blob in chunks:
            fh.write(blob)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> ndarray
    iteration: int
    seed: int


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\nPAYLOAD\n"
    cut = blob.find(marker)
    if cut < 0:
        raise ParseError(f"{path}: no PAYLOAD marker in checkpoint")
    try:
        header = blob[:cut].decode("ascii")
    except UnicodeDecodeError as e:
        raise ParseError(f"{path}: non-ascii manifest at byte {e.start}") from None
    payload = blob[cut + len(marker) :]
    lines = header.split("\n")
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic at byte 0")
    iteration = seed = 0
    flat = {}
    table = []
    for ln in lines[1:]:
        kind, _, rest = ln.partition(" ")
        if kind == "iteration":
            iteration = int(rest)
        elif kind == "seed":
            seed = int(rest)
        elif kind == "config":
            key, _, value = rest.partition("=")
            flat[key] = value
        elif kind == "param":
            parts = rest.rsplit(" ", 3)
            if len(parts) != 4:
                raise ParseError(f"{path}: malformed param line {ln!r}")
            name, tag, shape_s, offset_s = parts
            if tag not in _TAG_DTYPES:
                raise ParseError(f"{path}: unknown element type {tag!r} in {ln!r}")
            shape = tuple(int(s) for s in shape_s.split(","))
            table.append((name, tag, shape, int(offset_s)))
        else:
            raise ParseError(f"{path}: unknown manifest line {ln!r}")
    try:
        config = ModelConfig.from_flat(flat)
    except (ValueError, TypeError) as e:
        raise ParseError(f"{path}: bad config snapshot: {e}") from None
    params = {}
    for name, tag, shape, offset in table:
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(payload):
            raise IntegrityError(
                f"{path}: parameter {name} needs bytes [{offset}, {offset + nbytes}) "
                f"but payload has {len(payload)}"
            )
        params[name] = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)),
                                     offset=offset).reshape(shape).copy()
    total = sum(int(np.prod(s)) * _TAG_DTYPES[t].itemsize for _, t, s, _ in table)
    if total != len(payload):
        raise IntegrityError(f"{path}: payload holds {len(payload)} bytes, manifest promises {total}")
    return Checkpoint(config, params, iteration, seed)


def load_state(model, checkpoint):
    """Copy checkpoint parameters into the model; any mismatch names the
    first offending parameter."""
    own = model.parameters()
    for name, p in own.items():
        if name not in checkpoint.params:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        arr = checkpoint.params[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"parameter {name} has shape {tuple(arr.shape)} in the checkpoint "
                f"but {tuple(p.shape)} in the model"
            )
        p.data = np.ascontiguousarray(arr.astype(p.data.dtype, copy=False))
    extra = set(checkpoint.params) - set(own)
    if extra:
        raise CheckpointError(f"checkpoint carries unknown parameter {sorted(extra)[0]}")


def restore_model(path):
    """Rebuild the model a checkpoint describes and load its weights."""
    ckpt = load_checkpoint(path)
    model = Model(ckpt.config, seed=ckpt.seed)
    load_state(model, ckpt)
    return model, ckpt


# ---------------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------------

ABLATION_AXES = {
    "skips": (0, 1, 3),
    "patch": (8, 16, 32),
    "resolution": (64, 224),
    "scale": ("tiny", "base"),
}


def ablation_config(base_cfg, axis, value):
    if axis == "skips":
        return replace(base_cfg, encoder="hybrid", decoder="cup", skip_count=value)
    if axis == "patch":
        return replace(base_cfg, encoder="vit", decoder="cup", skip_count=0, patch_size=value)
    if axis == "resolution":
        return replace(base_cfg, height=value, width=value)
    if axis == "scale":
        dim, depth, heads, mlp_dim = PRESETS[value]
        return replace(base_cfg, scale=value, dim=dim, depth=depth, heads=heads, mlp_dim=mlp_dim)
    raise ConfigError(f"unknown ablation axis {axis!r}; have {sorted(ABLATION_AXES)}")


def _phantom_cases(spec, num_cases):
    cases = []
    for i in range(num_cases):
        rng = np.random.default_rng([int(spec.seed), i])
        image, labels = generate_phantom(spec, rng=rng)
        cases.append((f"case_{i:03d}", image, labels))
    return cases


def run_ablation(axis, base_cfg, train_cfg, data_spec, num_cases=8, train_fraction=0.75,
                 out_dir=None):
    """Train/evaluate one model per axis value with a shared seed and dataset.

    The phantom set is regenerated from the same spec seed whenever an axis
    value changes the input geometry (the resolution axis); all other axes
    share one dataset. Returns one row per value and writes them as TSV when
    out_dir is given.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; have {sorted(ABLATION_AXES)}")
    if base_cfg.num_classes != data_spec.num_classes:
        raise ConfigError(
            f"model expects {base_cfg.num_classes} classes but the phantom spec "
            f"produces {data_spec.num_classes}"
        )
    rows = []
    cache = {}
    for value in ABLATION_AXES[axis]:
        cfg = ablation_config(base_cfg, axis, value).validate()
        geom = (cfg.height, cfg.width)
        if geom not in cache:
            spec = replace(data_spec, shape=(data_spec.shape[0], cfg.height, cfg.width))
            cases = _phantom_cases(spec, num_cases)
            n_train = max(1, int(round(train_fraction * num_cases)))
            train_slices = []
            for _, image, labels in cases[:n_train]:
                for z in range(image.shape[0]):
                    train_slices.append((image[z], labels.voxels[z]))
            cache[geom] = (train_slices, cases[n_train:])
        train_slices, val_cases = cache[geom]
        model = Model(cfg, seed=train_cfg.seed)
        train(model, train_cfg, train_slices)
        if val_cases:
            report = evaluate_case_set(val_cases, model.predict_slice)
            mean_dsc, mean_hd = report.mean_dsc, report.mean_hd_mm
        else:
            mean_dsc = mean_hd = float("nan")
        rows.append(
            {
                "axis": axis,
                "value": value,
                "seq_length": cfg.seq_length,
                "mean_dsc": mean_dsc,
                "mean_hd_mm": mean_hd,
            }
        )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"ablation_{axis}.tsv")
        with open(path, "w", encoding="ascii") as fh:
            fh.write("value\tseq_length\tmean_dsc\tmean_hd_mm\n")
            for r in rows:
                fh.write(f"{r['value']}\t{r['seq_length']}\t{r['mean_dsc']!r}\t{r['mean_hd_mm']!r}\n")
    return rows
