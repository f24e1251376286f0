"""Small deterministic multimodal classifier with exact analytic gradients.

Audio branch: patch mean-pool -> affine -> leaky rectify -> affine.
Text branch: summed attribute embeddings -> affine.
Head: affine over the concatenated branch outputs, softmax cross-entropy.

All parameters live in one flat ParamVector so federated aggregation,
gradient alignment, and the finite-difference Hessian-vector product can
treat the model as a plain vector function.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .arrays import ParamVector, SpecGrid, build_registry
from .errors import ConfigError, DataError, EmptyBatch, IncompatibleRegistry, ShapeMismatch
from .rng import RngStream
from .text_meta import EmbeddingTable, MetaPrompt

CHECKPOINT_MAGIC = "FLATMODEL-1"


@dataclass(frozen=True)
class ModelSpec:
    freq_bins: int
    time_frames: int
    vocab: tuple
    pool_f: int = 16
    pool_t: int = 16
    hidden: int = 32
    embed_width: int = 16
    num_classes: int = 4
    input_shift: float = -76.0
    input_scale: float = 12.0
    leak_slope: float = 0.2

    def __post_init__(self):
        for name in ("freq_bins", "time_frames", "pool_f", "pool_t", "hidden", "embed_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.num_classes != 4:
            raise ConfigError("this artifact fixes the class count at 4")
        if self.freq_bins % self.pool_f or self.time_frames % self.pool_t:
            raise ConfigError(
                f"pool sizes ({self.pool_f},{self.pool_t}) must divide the grid "
                f"({self.freq_bins},{self.time_frames})"
            )
        if self.input_scale <= 0:
            raise ConfigError("input_scale must be positive")
        if len(set(self.vocab)) != len(self.vocab) or not self.vocab:
            raise ConfigError("vocab must be a non-empty set of distinct tokens")
        object.__setattr__(self, "vocab", tuple(self.vocab))

    @property
    def audio_dim(self) -> int:
        return (self.freq_bins // self.pool_f) * (self.time_frames // self.pool_t)

    def registry(self) -> tuple:
        h, e, k = self.hidden, self.embed_width, self.num_classes
        return build_registry(
            [
                ("audio1_w", (h, self.audio_dim)),
                ("audio1_b", (h,)),
                ("audio2_w", (h, h)),
                ("audio2_b", (h,)),
                ("embed", (len(self.vocab), e)),
                ("text_w", (h, e)),
                ("text_b", (h,)),
                ("fuse_w", (k, 2 * h)),
                ("fuse_b", (k,)),
            ]
        )


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z >= 0, z, slope * z)


def _views(spec: ModelSpec, values: np.ndarray) -> dict:
    out = {}
    for name, offset, shape in spec.registry():
        out[name] = values[offset : offset + int(np.prod(shape))].reshape(shape)
    return out


def pool_grids(spec: ModelSpec, grids: np.ndarray) -> np.ndarray:
    """(B, F, T) -> standardized (B, audio_dim) patch means."""
    b = grids.shape[0]
    nf, nt = spec.freq_bins // spec.pool_f, spec.time_frames // spec.pool_t
    pooled = grids.reshape(b, nf, spec.pool_f, nt, spec.pool_t).mean(axis=(2, 4))
    return (pooled.reshape(b, nf * nt) - spec.input_shift) / spec.input_scale


def _forward_arrays(spec: ModelSpec, w: dict, a_in: np.ndarray, tvecs: np.ndarray):
    h1 = a_in @ w["audio1_w"].T + w["audio1_b"]
    a1 = _leaky(h1, spec.leak_slope)
    a2 = a1 @ w["audio2_w"].T + w["audio2_b"]
    tf = tvecs @ w["text_w"].T + w["text_b"]
    fused = np.concatenate([a2, tf], axis=1)
    logits = fused @ w["fuse_w"].T + w["fuse_b"]
    return h1, a1, a2, tf, fused, logits


def _loss_grad_arrays(
    spec: ModelSpec,
    values: np.ndarray,
    grids: np.ndarray,
    token_ids,
    tvecs,
    labels: np.ndarray,
):
    """Mean cross-entropy and its exact gradient over stacked batch arrays.

    token_ids is a (B, 4) int array of embedding rows (or None when tvecs is
    given directly, in which case no gradient reaches the embedding table).
    """
    w = _views(spec, values)
    b = grids.shape[0]
    if token_ids is not None:
        tvecs = w["embed"][token_ids].sum(axis=1)
    a_in = pool_grids(spec, grids)
    h1, a1, a2, tf, fused, logits = _forward_arrays(spec, w, a_in, tvecs)

    zmax = logits.max(axis=1, keepdims=True)
    expz = np.exp(logits - zmax)
    sumexp = expz.sum(axis=1, keepdims=True)
    probs = expz / sumexp
    log_probs = (logits - zmax) - np.log(sumexp)

    if labels.ndim == 1:
        y = np.zeros_like(logits)
        y[np.arange(b), labels] = 1.0
    else:
        y = labels
    loss = float(-(y * log_probs).sum() / b)

    dz = (probs - y) / b
    grad = np.zeros_like(values)
    g = _views(spec, grad)
    h = spec.hidden
    g["fuse_w"][:] = dz.T @ fused
    g["fuse_b"][:] = dz.sum(axis=0)
    dfused = dz @ w["fuse_w"]
    da2, dtf = dfused[:, :h], dfused[:, h:]
    g["audio2_w"][:] = da2.T @ a1
    g["audio2_b"][:] = da2.sum(axis=0)
    da1 = da2 @ w["audio2_w"]
    dh1 = da1 * np.where(h1 >= 0, 1.0, spec.leak_slope)
    g["audio1_w"][:] = dh1.T @ a_in
    g["audio1_b"][:] = dh1.sum(axis=0)
    g["text_w"][:] = dtf.T @ tvecs
    g["text_b"][:] = dtf.sum(axis=0)
    dtvecs = dtf @ w["text_w"]
    if token_ids is not None:
        np.add.at(g["embed"], token_ids.reshape(-1), np.repeat(dtvecs, 4, axis=0))
    return loss, grad


class FlatModel:
    """Model spec plus its flat parameter vector."""

    __slots__ = ("spec", "params", "_table")

    def __init__(self, spec: ModelSpec, params: ParamVector):
        if params.registry != spec.registry():
            raise IncompatibleRegistry("parameter vector does not match the model spec")
        self.spec = spec
        self.params = params
        self._table = None

    @classmethod
    def init(cls, spec: ModelSpec, stream: RngStream) -> "FlatModel":
        """U(-s, s) init with s = sqrt(1/fan_in) per layer, drawn in registry order."""
        fan_in = {
            "audio1_w": spec.audio_dim,
            "audio1_b": spec.audio_dim,
            "audio2_w": spec.hidden,
            "audio2_b": spec.hidden,
            "embed": spec.embed_width,
            "text_w": spec.embed_width,
            "text_b": spec.embed_width,
            "fuse_w": 2 * spec.hidden,
            "fuse_b": 2 * spec.hidden,
        }
        registry = spec.registry()
        values = np.empty(sum(int(np.prod(s)) for _, _, s in registry))
        for name, offset, shape in registry:
            s = np.sqrt(1.0 / fan_in[name])
            n = int(np.prod(shape))
            values[offset : offset + n] = stream.uniform(-s, s, size=n)
        return cls(spec, ParamVector(values, registry))

    def with_params(self, params: ParamVector) -> "FlatModel":
        return FlatModel(self.spec, params)

    @property
    def embedding_table(self) -> EmbeddingTable:
        # params are immutable, so the view stays valid for this instance
        if self._table is None:
            self._table = EmbeddingTable(self.spec.vocab, self.params.view("embed"))
        return self._table

    def token_ids(self, prompt: MetaPrompt) -> np.ndarray:
        return np.asarray(self.embedding_table.prompt_rows(prompt), dtype=np.intp)

    def _check_grid(self, x: SpecGrid):
        if x.freq_bins != self.spec.freq_bins or x.time_frames != self.spec.time_frames:
            raise ShapeMismatch(
                f"grid {x.freq_bins}x{x.time_frames} does not match model "
                f"{self.spec.freq_bins}x{self.spec.time_frames}"
            )

    def forward(self, x: SpecGrid, t_vec: np.ndarray) -> np.ndarray:
        """Logits for one (grid, embedded-prompt) pair."""
        self._check_grid(x)
        t_vec = np.asarray(t_vec, dtype=np.float64)
        if t_vec.shape != (self.spec.embed_width,):
            raise ShapeMismatch(f"t_vec must have shape ({self.spec.embed_width},)")
        w = _views(self.spec, self.params.values)
        a_in = pool_grids(self.spec, x.values[None])
        logits = _forward_arrays(self.spec, w, a_in, t_vec[None])[-1]
        return logits[0]

    def logits_batch(self, grids: np.ndarray, token_ids: np.ndarray) -> np.ndarray:
        w = _views(self.spec, self.params.values)
        tvecs = w["embed"][token_ids].sum(axis=1)
        a_in = pool_grids(self.spec, grids)
        return _forward_arrays(self.spec, w, a_in, tvecs)[-1]

    def embed_audio(self, x: SpecGrid) -> np.ndarray:
        """Audio-branch output (length hidden), the probe's embedding."""
        self._check_grid(x)
        w = _views(self.spec, self.params.values)
        a_in = pool_grids(self.spec, x.values[None])
        h1 = a_in @ w["audio1_w"].T + w["audio1_b"]
        a1 = _leaky(h1, self.spec.leak_slope)
        return (a1 @ w["audio2_w"].T + w["audio2_b"])[0]

    def embed_audio_batch(self, grids: np.ndarray) -> np.ndarray:
        w = _views(self.spec, self.params.values)
        a_in = pool_grids(self.spec, grids)
        h1 = a_in @ w["audio1_w"].T + w["audio1_b"]
        a1 = _leaky(h1, self.spec.leak_slope)
        return a1 @ w["audio2_w"].T + w["audio2_b"]

    def _stack_batch(self, batch):
        if not batch:
            raise EmptyBatch("loss needs a non-empty batch")
        b = len(batch)
        grids = np.empty((b, self.spec.freq_bins, self.spec.time_frames))
        tvecs = np.zeros((b, self.spec.embed_width))
        ids = np.zeros((b, 4), dtype=np.intp)
        any_prompt = False
        any_vec = False
        soft = any(np.ndim(item[2]) == 1 for item in batch)
        labels = (
            np.zeros((b, self.spec.num_classes)) if soft else np.zeros(b, dtype=np.intp)
        )
        for i, (x, tmeta, label) in enumerate(batch):
            self._check_grid(x)
            grids[i] = x.values
            if isinstance(tmeta, MetaPrompt):
                ids[i] = self.embedding_table.prompt_rows(tmeta)
                any_prompt = True
            else:
                tvecs[i] = np.asarray(tmeta, dtype=np.float64)
                any_vec = True
            if soft:
                lab = np.asarray(label, dtype=np.float64)
                if lab.ndim == 0:
                    onehot = np.zeros(self.spec.num_classes)
                    onehot[int(lab)] = 1.0
                    lab = onehot
                labels[i] = lab
            else:
                labels[i] = int(label)
        if any_prompt and any_vec:
            raise DataError("batch mixes prompts and raw text vectors")
        return grids, (ids if any_prompt else None), tvecs, labels

    def loss_and_grad(self, batch) -> tuple[float, ParamVector]:
        """Mean cross-entropy and exact gradient over (grid, prompt|t_vec, label) items."""
        grids, ids, tvecs, labels = self._stack_batch(batch)
        loss, grad = _loss_grad_arrays(self.spec, self.params.values, grids, ids, tvecs, labels)
        return loss, ParamVector(grad, self.params.registry)

    def loss_and_grad_ids(
        self, grids: np.ndarray, token_ids: np.ndarray, labels: np.ndarray
    ) -> tuple[float, ParamVector]:
        """Vectorized path over pre-stacked arrays with embedding-row ids."""
        if grids.shape[0] == 0:
            raise EmptyBatch("loss needs a non-empty batch")
        loss, grad = _loss_grad_arrays(
            self.spec, self.params.values, grids, token_ids, None, labels
        )
        return loss, ParamVector(grad, self.params.registry)

    def hvp(self, sample, v: ParamVector, delta: float = 1e-4) -> ParamVector:
        """Central-difference Hessian-vector product of the single-sample loss."""
        if v.registry != self.params.registry:
            raise IncompatibleRegistry("direction vector does not match model registry")
        if delta <= 0:
            raise ConfigError("delta must be positive")
        grids, ids, tvecs, labels = self._stack_batch([sample])

        def grad_at(theta: np.ndarray) -> np.ndarray:
            return _loss_grad_arrays(self.spec, theta, grids, ids, tvecs, labels)[1]

        h = delta / (v.norm() + delta)
        gplus = grad_at(self.params.values + h * v.values)
        gminus = grad_at(self.params.values - h * v.values)
        return ParamVector((gplus - gminus) / (2.0 * h), self.params.registry)


def hvp_finite_diff(grad_fn, theta: ParamVector, v: ParamVector, delta: float = 1e-4) -> ParamVector:
    """Generic central-difference H*v for any gradient function of theta."""
    if theta.registry != v.registry:
        raise IncompatibleRegistry("theta and v registries differ")
    h = delta / (v.norm() + delta)
    gplus = grad_fn(ParamVector(theta.values + h * v.values, theta.registry))
    gminus = grad_fn(ParamVector(theta.values - h * v.values, theta.registry))
    return ParamVector((gplus.values - gminus.values) / (2.0 * h), theta.registry)


def save_checkpoint(model: FlatModel, path) -> None:
    """Versioned text header (dims, scaling, vocab, registry) + raw LE float64."""
    spec = model.spec
    for tok in spec.vocab:
        if any(ch.isspace() for ch in tok):
            raise ConfigError(f"vocab token {tok!r} contains whitespace")
    buf = io.StringIO()
    buf.write(f"{CHECKPOINT_MAGIC}\n")
    buf.write(
        f"dims {spec.freq_bins} {spec.time_frames} {spec.pool_f} {spec.pool_t} "
        f"{spec.hidden} {spec.embed_width} {spec.num_classes}\n"
    )
    buf.write(f"scale {spec.input_shift!r} {spec.input_scale!r} {spec.leak_slope!r}\n")
    buf.write("vocab " + " ".join(spec.vocab) + "\n")
    for name, offset, shape in model.params.registry:
        buf.write(f"entry {name} {offset} {','.join(str(d) for d in shape)}\n")
    buf.write(f"params {model.params.size}\n")
    buf.write("end\n")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue().encode("ascii"))
        fh.write(model.params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> FlatModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        header_end = raw.index(b"\nend\n") + len(b"\nend\n")
    except ValueError:
        raise DataError(f"{path}: not a model checkpoint (missing header terminator)")
    lines = raw[:header_end].decode("ascii").splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    dims = None
    scale = None
    vocab = None
    entries = []
    count = None
    for line in lines[1:-1]:
        kind, _, rest = line.partition(" ")
        if kind == "dims":
            dims = [int(v) for v in rest.split()]
        elif kind == "scale":
            scale = [float(v) for v in rest.split()]
        elif kind == "vocab":
            vocab = tuple(rest.split())
        elif kind == "entry":
            name, offset, shape = rest.split()
            entries.append((name, int(offset), tuple(int(d) for d in shape.split(","))))
        elif kind == "params":
            count = int(rest)
        else:
            raise DataError(f"{path}: unknown checkpoint header line {line!r}")
    if dims is None or scale is None or vocab is None or count is None:
        raise DataError(f"{path}: incomplete checkpoint header")
    spec = ModelSpec(
        freq_bins=dims[0],
        time_frames=dims[1],
        vocab=vocab,
        pool_f=dims[2],
        pool_t=dims[3],
        hidden=dims[4],
        embed_width=dims[5],
        num_classes=dims[6],
        input_shift=scale[0],
        input_scale=scale[1],
        leak_slope=scale[2],
    )
    if tuple(entries) != spec.registry():
        raise DataError(f"{path}: registry does not match the declared dims")
    payload = raw[header_end:]
    if len(payload) != 8 * count:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, header says {8 * count} ")
    values = np.frombuffer(payload, dtype="<f8")
    return FlatModel(spec, ParamVector(values, spec.registry()))
