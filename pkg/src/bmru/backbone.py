"""Network skeletons: the compile-ready hardware chain and the richer
software stack, plus pooling and prediction rules.

The hardware backbone keeps every stage mappable onto current-mode
primitives: linear layers carry a rectifier (diode output), bistable
cells are window comparators, skip connections are plain additions, and
the classifier emits non-negative class signals.  Every stage is
retrievable through a named probe so circuit simulations can be compared
signal by signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cells as C
from .autodiff import Tensor, constant, leaf

__all__ = [
    "HardwareConfig",
    "HardwareBackbone",
    "HwForward",
    "SignalNoise",
    "PoolingRule",
    "majority_vote",
    "predict_majority",
    "sinusoidal_pe",
    "reparameterize_prop1",
    "run_bipolar_with_head",
    "run_unipolar_with_head",
    "SoftwareConfig",
    "SoftwareBackbone",
    "probe_names",
]

HW_CELL_KINDS = ("fq-bmru", "lru", "mingru")


@dataclass
class HardwareConfig:
    n_in: int
    d: int
    n_layers: int = 2
    n_classes: int = 2
    cell: str = "fq-bmru"

    def __post_init__(self):
        if self.cell not in HW_CELL_KINDS:
            raise ValueError(f"hardware backbone supports {HW_CELL_KINDS}, got {self.cell!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    def to_dict(self) -> dict:
        return {"n_in": self.n_in, "d": self.d, "n_layers": self.n_layers,
                "n_classes": self.n_classes, "cell": self.cell}

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareConfig":
        return cls(**d)


def probe_names(cfg: HardwareConfig) -> list[str]:
    names = ["input_proj"]
    for i in range(cfg.n_layers):
        names += [f"layer{i}.candidate", f"layer{i}.state", f"layer{i}.post_skip"]
    names.append("logits")
    return names


class SignalNoise:
    """Per-stage i.i.d. Gaussian injection for robustness studies.

    std_by_stage maps stage names (probe names plus per-layer "fc"
    stages) to standard deviations in signal units.  Stages without an
    entry pass through untouched.
    """

    def __init__(self, std_by_stage: dict[str, float], rng: np.random.Generator):
        self.std_by_stage = dict(std_by_stage)
        self.rng = rng

    def apply(self, t: Tensor, stage: str) -> Tensor:
        std = self.std_by_stage.get(stage, 0.0)
        if std <= 0.0:
            return t
        return ad.add(t, constant(self.rng.normal(0.0, std, size=t.shape)))


@dataclass
class HwForward:
    logits_flat: Tensor      # (T*B, C), timestep-major rows
    t_len: int
    batch: int
    probes: dict | None = None
    signals: dict | None = None

    def logits_array(self) -> np.ndarray:
        c = self.logits_flat.shape[1]
        return self.logits_flat.data.reshape(self.t_len, self.batch, c).transpose(1, 0, 2)


class _HwLayer:
    def __init__(self, cell, fc_w: Tensor, fc_b: Tensor):
        self.cell = cell      # trainable container or effective params
        self.fc_w = fc_w
        self.fc_b = fc_b


def _linear_init(rng, n_in, n_out):
    s = 1.0 / math.sqrt(n_in)
    return rng.uniform(-s, s, size=(n_in, n_out)), rng.uniform(-s, s, size=n_out)


_TRAINABLE = {
    "fq-bmru": C.TrainableFqBmru,
    "lru": C.TrainableLru,
    "mingru": C.TrainableMinGru,
}


class HardwareBackbone:
    """Input projection, stacked recurrent layers with skips, classifier.

    Signal chain per layer i (all stages rectified except the cell):

        u -> candidate = relu(u @ w_x + b_x) -> cell window -> state
        post_skip = state + u
        u' = relu(post_skip @ fc_w + fc_b)

    preceded by input_proj (linear+relu) and followed by the classifier
    (linear+relu) producing per-timestep class signals.
    """

    def __init__(self, cfg: HardwareConfig, input_w, input_b, layers, cls_w, cls_b,
                 trainable: bool):
        self.cfg = cfg
        self.input_w = input_w
        self.input_b = input_b
        self.layers: list[_HwLayer] = layers
        self.cls_w = cls_w
        self.cls_b = cls_b
        self.trainable = trainable

    # -- construction -------------------------------------------------

    @classmethod
    def init(cls, cfg: HardwareConfig, rng: np.random.Generator) -> "HardwareBackbone":
        iw, ib = _linear_init(rng, cfg.n_in, cfg.d)
        layers = []
        for _ in range(cfg.n_layers):
            cell = _TRAINABLE[cfg.cell].init(cfg.d, cfg.d, rng)
            fw, fb = _linear_init(rng, cfg.d, cfg.d)
            layers.append(_HwLayer(cell, leaf(fw, "fc.w"), leaf(fb, "fc.b")))
        cw, cb = _linear_init(rng, cfg.d, cfg.n_classes)
        return cls(cfg, leaf(iw, "input_proj.w"), leaf(ib, "input_proj.b"),
                   layers, leaf(cw, "classifier.w"), leaf(cb, "classifier.b"),
                   trainable=True)

    @classmethod
    def from_arrays(cls, cfg: HardwareConfig, tensors: dict) -> "HardwareBackbone":
        """Inference-only model from an effective-parameter snapshot."""
        def grab(name):
            return constant(np.asarray(tensors[name], dtype=np.float64))

        layers = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}.cell."
            if cfg.cell == "fq-bmru":
                cell = C.FqBmruParams(grab(p + "w_x"), grab(p + "b_x"),
                                      grab(p + "beta_lo"), grab(p + "delta"),
                                      grab(p + "alpha"))
                cell.validate()
            elif cfg.cell == "lru":
                cell = C.LruParams(grab(p + "nu"), grab(p + "theta"),
                                   grab(p + "b_re"), grab(p + "b_im"),
                                   grab(p + "c_re"), grab(p + "c_im"),
                                   grab(p + "d_mat"))
            else:
                cell = C.MinGruParams(grab(p + "w_z"), grab(p + "b_z"),
                                      grab(p + "w_h"), grab(p + "b_h"))
            layers.append(_HwLayer(cell, grab(f"layers.{i}.fc.w"), grab(f"layers.{i}.fc.b")))
        return cls(cfg, grab("input_proj.w"), grab("input_proj.b"), layers,
                   grab("classifier.w"), grab("classifier.b"), trainable=False)

    # -- parameter access ----------------------------------------------

    def leaves(self) -> list[tuple[str, Tensor]]:
        if not self.trainable:
            raise ValueError("inference model has no trainable leaves")
        out = [("input_proj.w", self.input_w), ("input_proj.b", self.input_b)]
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.cell.{n}", t) for n, t in layer.cell.leaves()]
            out += [(f"layers.{i}.fc.w", layer.fc_w), (f"layers.{i}.fc.b", layer.fc_b)]
        out += [("classifier.w", self.cls_w), ("classifier.b", self.cls_b)]
        return out

    def _cell_params(self, layer: _HwLayer):
        if self.trainable:
            return layer.cell.materialize()
        return layer.cell

    def to_arrays(self) -> dict:
        """Effective-parameter snapshot keyed by stable names."""
        out = {"input_proj.w": self.input_w.data.copy(),
               "input_proj.b": self.input_b.data.copy()}
        for i, layer in enumerate(self.layers):
            cell = layer.cell.effective() if self.trainable else layer.cell
            p = f"layers.{i}.cell."
            if self.cfg.cell == "fq-bmru":
                out[p + "w_x"] = cell.w_x.data.copy()
                out[p + "b_x"] = cell.b_x.data.copy()
                out[p + "beta_lo"] = cell.beta_lo.data.copy()
                out[p + "delta"] = cell.delta.data.copy()
                out[p + "alpha"] = cell.alpha.data.copy()
            elif self.cfg.cell == "lru":
                for n in ("nu", "theta", "b_re", "b_im", "c_re", "c_im", "d_mat"):
                    out[p + n] = getattr(cell, n).data.copy()
            else:
                for n in ("w_z", "b_z", "w_h", "b_h"):
                    out[p + n] = getattr(cell, n).data.copy()
            out[f"layers.{i}.fc.w"] = layer.fc_w.data.copy()
            out[f"layers.{i}.fc.b"] = layer.fc_b.data.copy()
        out["classifier.w"] = self.cls_w.data.copy()
        out["classifier.b"] = self.cls_b.data.copy()
        return out

    # -- forward --------------------------------------------------------

    def forward(self, seq, *, training: bool = False, eps: float = 0.0,
                rng: np.random.Generator | None = None, dropout_rate: float = 0.0,
                collect_probes: bool = False, collect_signals: bool = False,
                noise: SignalNoise | None = None, h0_mode: str | None = None,
                scan_block: int = C.DEFAULT_SCAN_BLOCK) -> HwForward:
        cfg = self.cfg
        arr = np.asarray(seq, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[2] != cfg.n_in:
            raise ad.ShapeError(f"expected (B, T, {cfg.n_in}) input, got {arr.shape}")
        batch, t_len = arr.shape[0], arr.shape[1]
        if eps != 0.0 and cfg.cell != "fq-bmru":
            raise ValueError("eps annealing applies only to bistable cells")
        if h0_mode is None:
            h0_mode = "train" if (training and cfg.cell == "fq-bmru") else "zero"

        flat = constant(arr.transpose(1, 0, 2).reshape(t_len * batch, cfg.n_in))
        probes: dict = {}
        signals: dict = {}

        def note(stage, tensor):
            if collect_signals:
                signals[stage] = self._unflatten(tensor.data, t_len, batch)
            if collect_probes and stage in set(probe_names(cfg)):
                probes[stage] = self._unflatten(tensor.data, t_len, batch)

        u = ad.relu(ad.add(ad.matmul(flat, self.input_w), self.input_b))
        if noise:
            u = noise.apply(u, "input_proj")
        note("input_proj", u)

        for li, layer in enumerate(self.layers):
            params = self._cell_params(layer)
            state_signal = self._run_cell(
                li, params, u, t_len, batch, training=training, eps=eps, rng=rng,
                dropout_rate=dropout_rate, noise=noise, h0_mode=h0_mode,
                scan_block=scan_block, note=note)
            post = ad.add(state_signal, u)
            if noise:
                post = noise.apply(post, f"layer{li}.post_skip")
            note(f"layer{li}.post_skip", post)
            u = ad.relu(ad.add(ad.matmul(post, layer.fc_w), layer.fc_b))
            if noise:
                u = noise.apply(u, f"layer{li}.fc")
            note(f"layer{li}.fc", u)

        logits = ad.relu(ad.add(ad.matmul(u, self.cls_w), self.cls_b))
        if noise:
            logits = noise.apply(logits, "logits")
        note("logits", logits)
        return HwForward(logits, t_len, batch,
                         probes=probes if collect_probes else None,
                         signals=signals if collect_signals else None)

    @staticmethod
    def _unflatten(flat: np.ndarray, t_len: int, batch: int) -> np.ndarray:
        return flat.reshape(t_len, batch, -1).transpose(1, 0, 2)

    def _initial_state(self, params, batch, h0_mode, rng):
        d = self.cfg.d
        if self.cfg.cell == "lru":
            z = np.zeros((batch, d))
            return (constant(z), constant(z.copy()))
        if h0_mode == "zero" or self.cfg.cell != "fq-bmru":
            return constant(np.zeros((batch, d)))
        if h0_mode == "train":
            if rng is None:
                raise ValueError("training-mode initial state needs an rng")
            u01 = constant(rng.uniform(0.0, 1.0, size=(batch, d)))
            return ad.mul(ad.heaviside(ad.sub(u01, 0.5)), params.alpha)
        raise ValueError(f"unknown h0 mode {h0_mode!r}")

    def _run_cell(self, li, params, u, t_len, batch, *, training, eps, rng,
                  dropout_rate, noise, h0_mode, scan_block, note):
        cfg = self.cfg
        name = f"layer{li}"
        h0 = self._initial_state(params, batch, h0_mode, rng)

        if cfg.cell == "fq-bmru":
            cand = ad.relu(ad.add(ad.matmul(u, params.w_x), params.b_x))
            if training and dropout_rate > 0.0:
                cand = ad.dropout(cand, dropout_rate, rng)
            if noise:
                cand = noise.apply(cand, f"{name}.candidate")
            note(f"{name}.candidate", cand)
            z_lo, z_hi = C.fq_bmru_gates(params, cand)
            a_flat = ad.mul(ad.sub(1.0, z_lo), ad.sub(1.0, z_hi))
            b_flat = ad.mul(z_hi, params.alpha)
            states = self._affine_recurrence(a_flat, b_flat, h0, t_len, batch,
                                             eps, scan_block)
            note(f"{name}.state", states)
            return states

        if cfg.cell == "mingru":
            z = ad.sigmoid(ad.add(ad.matmul(u, params.w_z), params.b_z))
            htilde = ad.add(ad.matmul(u, params.w_h), params.b_h)
            note(f"{name}.candidate", htilde)
            state_noise_std = noise.std_by_stage.get(f"{name}.state", 0.0) if noise else 0.0
            if state_noise_std > 0.0:
                states = self._noisy_state_loop(
                    lambda a_t, b_t, h: ad.add(ad.mul(a_t, h), b_t),
                    ad.sub(1.0, z), htilde, h0, t_len, batch, noise, f"{name}.state")
            else:
                states = self._affine_recurrence(ad.sub(1.0, z), htilde, h0,
                                                 t_len, batch, 0.0, scan_block)
            note(f"{name}.state", states)
            return states

        # lru: complex recurrence, real readout
        lre, lim = params.lambda_parts()
        gam = params.gamma()
        bu_re = ad.mul(ad.matmul(u, params.b_re), gam)
        bu_im = ad.mul(ad.matmul(u, params.b_im), gam)
        note(f"{name}.candidate", bu_re)
        state_noise_std = noise.std_by_stage.get(f"{name}.state", 0.0) if noise else 0.0
        xr, xi = self._complex_recurrence(lre, lim, bu_re, bu_im, h0, t_len, batch,
                                          scan_block, noise if state_noise_std > 0 else None,
                                          f"{name}.state")
        y = ad.add(ad.sub(ad.matmul(xr, params.c_re), ad.matmul(xi, params.c_im)),
                   ad.matmul(u, params.d_mat))
        note(f"{name}.state", y)
        return y

    def _slices(self, flat: Tensor, t_len: int, batch: int) -> list[Tensor]:
        return [ad.slice_rows(flat, t * batch, (t + 1) * batch) for t in range(t_len)]

    def _affine_recurrence(self, a_flat, b_flat, h0, t_len, batch, eps, scan_block):
        a_steps = self._slices(a_flat, t_len, batch)
        b_steps = self._slices(b_flat, t_len, batch)
        if eps != 0.0:
            # annealed form is evaluated sequentially
            states, h = [], h0
            for a_t, b_t in zip(a_steps, b_steps):
                h = ad.add(ad.mul(ad.add(a_t, float(eps)), h), b_t)
                states.append(h)
            return ad.stack_rows(states)
        elements = [C.AffineScanElement(a_t, b_t) for a_t, b_t in zip(a_steps, b_steps)]
        prefixes = C.scan_prefixes(elements, scan_block)
        return ad.stack_rows([p.apply(h0) for p in prefixes])

    def _noisy_state_loop(self, step, a_flat, b_flat, h0, t_len, batch, noise, stage):
        a_steps = self._slices(a_flat, t_len, batch)
        b_steps = self._slices(b_flat, t_len, batch)
        states, h = [], h0
        for a_t, b_t in zip(a_steps, b_steps):
            h = noise.apply(step(a_t, b_t, h), stage)
            states.append(h)
        return ad.stack_rows(states)

    def _complex_recurrence(self, lre, lim, bu_re, bu_im, h0, t_len, batch,
                            scan_block, noise, stage):
        re_steps = self._slices(bu_re, t_len, batch)
        im_steps = self._slices(bu_im, t_len, batch)
        if noise is not None:
            xr, xi = h0
            rs, is_ = [], []
            for br, bi in zip(re_steps, im_steps):
                nxr = ad.add(ad.sub(ad.mul(xr, lre), ad.mul(xi, lim)), br)
                nxi = ad.add(ad.add(ad.mul(xr, lim), ad.mul(xi, lre)), bi)
                xr = noise.apply(nxr, stage)
                xi = noise.apply(nxi, stage)
                rs.append(xr)
                is_.append(xi)
            return ad.stack_rows(rs), ad.stack_rows(is_)
        ones = constant(np.ones((batch, self.cfg.d)))
        a_re, a_im = ad.mul(ones, lre), ad.mul(ones, lim)
        elements = [C._ComplexElement(a_re, a_im, br, bi)
                    for br, bi in zip(re_steps, im_steps)]
        prefixes = C.scan_prefixes(elements, scan_block)
        applied = [p.apply(h0[0], h0[1]) for p in prefixes]
        return (ad.stack_rows([a[0] for a in applied]),
                ad.stack_rows([a[1] for a in applied]))


# ---------------------------------------------------------------------------
# pooling and prediction
# ---------------------------------------------------------------------------


@dataclass
class PoolingRule:
    """How per-timestep logits become a loss target or a prediction."""

    mode: str = "majority-vote-inference"

    _MODES = ("mean-logit-training", "majority-vote-inference", "none")

    def __post_init__(self):
        if self.mode not in self._MODES:
            raise ValueError(f"pooling mode must be one of {self._MODES}")


def majority_vote(logits: np.ndarray) -> int:
    """Most frequent per-timestep argmax; ties break to the lowest index."""
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("majority_vote needs a (T, C) array with T >= 1")
    votes = logits.argmax(axis=1)
    counts = np.bincount(votes, minlength=logits.shape[1])
    return int(counts.argmax())


def predict_majority(model: HardwareBackbone, seqs: np.ndarray,
                     **forward_kw) -> np.ndarray:
    out = model.forward(seqs, **forward_kw)
    logits = out.logits_array()
    return np.array([majority_vote(logits[b]) for b in range(logits.shape[0])])


def sinusoidal_pe(t_len: int, dim: int = 32) -> np.ndarray:
    """Interleaved sin/cos over a geometric frequency ladder (base 10000)."""
    if t_len < 1:
        raise ValueError("t_len must be >= 1")
    if dim % 2:
        raise ValueError("dim must be even")
    pos = np.arange(t_len)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)[None, :]
    pe = np.zeros((t_len, dim))
    pe[:, 0::2] = np.sin(pos * freqs)
    pe[:, 1::2] = np.cos(pos * freqs)
    return pe


# ---------------------------------------------------------------------------
# bipolar -> unipolar head reparameterization
# ---------------------------------------------------------------------------


def reparameterize_prop1(p: C.BmruParams, head_w: np.ndarray,
                         head_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjust a linear head so the unipolar cell reproduces bipolar logits.

    With states mapped through h+ = (h± + alpha) / 2, the head transform
    w~ = 2 w, b~ = b - alpha @ w leaves every output unchanged.
    """
    head_w = np.asarray(head_w, dtype=np.float64)
    head_b = np.asarray(head_b, dtype=np.float64)
    return 2.0 * head_w, head_b - p.alpha.data @ head_w


def run_bipolar_with_head(p: C.BmruParams, head_w, head_b, inputs, h0) -> np.ndarray:
    h = constant(np.atleast_2d(h0))
    logits = []
    for t in range(inputs.shape[0]):
        h = C.bmru_step(p, constant(inputs[t : t + 1]), h)
        logits.append(h.data @ head_w + head_b)
    return np.concatenate(logits, axis=0)


def run_unipolar_with_head(p: C.BmruParams, head_w, head_b, inputs, h0_bipolar) -> np.ndarray:
    h0 = (np.atleast_2d(h0_bipolar) + p.alpha.data) / 2.0
    h = constant(h0)
    logits = []
    for t in range(inputs.shape[0]):
        h = C.bmru_step(p, constant(inputs[t : t + 1]), h, unipolar=True)
        logits.append(h.data @ head_w + head_b)
    return np.concatenate(logits, axis=0)


# ---------------------------------------------------------------------------
# software backbone
# ---------------------------------------------------------------------------


@dataclass
class SoftwareConfig:
    n_in: int
    n_classes: int
    m: int = 64
    r: int = 2
    d: int = 32
    cell: str = "fq-bmru"
    pe_dim: int = 32
    dropout: float = 0.1


class _Mlp:
    """Linear -> GLU -> dropout -> Linear, hidden width 4x the input."""

    def __init__(self, rng, width: int, hidden: int):
        w1, b1 = _linear_init(rng, width, 2 * hidden)
        w2, b2 = _linear_init(rng, hidden, width)
        self.w1, self.b1 = leaf(w1), leaf(b1)
        self.w2, self.b2 = leaf(w2), leaf(b2)

    def leaves(self, prefix):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]

    def __call__(self, x, *, training=False, rate=0.0, rng=None):
        pre = ad.add(ad.matmul(x, self.w1), self.b1)
        hidden = glu(pre)
        if training and rate > 0.0:
            hidden = ad.dropout(hidden, rate, rng)
        return ad.add(ad.matmul(hidden, self.w2), self.b2)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit on column halves: (a || b) -> a * sigmoid(b)."""
    width = x.shape[1]
    if width % 2:
        raise ad.ShapeError("glu needs an even number of columns")
    a = ad.slice_cols(x, 0, width // 2)
    b = ad.slice_cols(x, width // 2, width)
    return ad.mul(a, ad.sigmoid(b))


class _Norm:
    def __init__(self, width: int):
        self.gamma = leaf(np.ones(width))
        self.beta = leaf(np.zeros(width))

    def leaves(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class _Block:
    def __init__(self, rng, cfg: SoftwareConfig):
        m, d = cfg.m, cfg.d
        self.norm_rec = _Norm(m)
        self.cell = _TRAINABLE[cfg.cell].init(d, m, rng)
        pw, pb = _linear_init(rng, d, m)
        gw, gb = _linear_init(rng, m, m)
        self.proj_w, self.proj_b = leaf(pw), leaf(pb)
        self.gate_w, self.gate_b = leaf(gw), leaf(gb)
        self.norm_inner = _Norm(m)
        self.scale_rec = leaf(np.ones(m))   # residual scale, initialized to ones
        self.norm_mlp = _Norm(m)
        self.mlp = _Mlp(rng, m, 4 * m)
        self.scale_mlp = leaf(np.ones(m))

    def leaves(self, prefix):
        out = self.norm_rec.leaves(f"{prefix}.norm_rec")
        out += [(f"{prefix}.cell.{n}", t) for n, t in self.cell.leaves()]
        out += [(f"{prefix}.proj.w", self.proj_w), (f"{prefix}.proj.b", self.proj_b),
                (f"{prefix}.gate.w", self.gate_w), (f"{prefix}.gate.b", self.gate_b)]
        out += self.norm_inner.leaves(f"{prefix}.norm_inner")
        out += [(f"{prefix}.scale_rec", self.scale_rec)]
        out += self.norm_mlp.leaves(f"{prefix}.norm_mlp")
        out += self.mlp.leaves(f"{prefix}.mlp")
        out += [(f"{prefix}.scale_mlp", self.scale_mlp)]
        return out


class SoftwareBackbone:
    """Encoder + positional encoding + r pre-norm residual blocks + decoder.

    Each block alternates a recurrent sub-layer
    norm(linear(cell(norm(x)))) * sigmoid(linear(norm(x))) and a
    point-wise GLU MLP, both added back through learnable residual
    scales.  The decoder maps every timestep to class logits.
    """

    def __init__(self, cfg: SoftwareConfig, rng: np.random.Generator):
        self.cfg = cfg
        ew, eb = _linear_init(rng, cfg.n_in, cfg.m)
        self.enc_w, self.enc_b = leaf(ew), leaf(eb)
        self.enc_mlp = _Mlp(rng, cfg.m, 4 * cfg.m)
        pw, pb = _linear_init(rng, cfg.m + cfg.pe_dim, cfg.m)
        self.pe_w, self.pe_b = leaf(pw), leaf(pb)
        self.blocks = [_Block(rng, cfg) for _ in range(cfg.r)]
        dw, db = _linear_init(rng, cfg.m, cfg.n_classes)
        self.dec_w, self.dec_b = leaf(dw), leaf(db)
        self.dec_mlp = _Mlp(rng, cfg.n_classes, 4 * cfg.m)

    def leaves(self) -> list[tuple[str, Tensor]]:
        out = [("enc.w", self.enc_w), ("enc.b", self.enc_b)]
        out += self.enc_mlp.leaves("enc.mlp")
        out += [("pe.w", self.pe_w), ("pe.b", self.pe_b)]
        for i, block in enumerate(self.blocks):
            out += block.leaves(f"blocks.{i}")
        out += [("dec.w", self.dec_w), ("dec.b", self.dec_b)]
        out += self.dec_mlp.leaves("dec.mlp")
        return out

    def forward(self, seq, *, training: bool = False,
                rng: np.random.Generator | None = None,
                h0_mode: str = "zero") -> np.ndarray | Tensor:
        cfg = self.cfg
        arr = np.asarray(seq, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        batch, t_len = arr.shape[0], arr.shape[1]
        flat = constant(arr.transpose(1, 0, 2).reshape(t_len * batch, cfg.n_in))
        rate = cfg.dropout if training else 0.0

        xt = ad.add(ad.matmul(flat, self.enc_w), self.enc_b)
        x = ad.add(xt, self.enc_mlp(xt, training=training, rate=rate, rng=rng))

        pe = np.repeat(sinusoidal_pe(t_len, cfg.pe_dim), batch, axis=0)
        x = ad.add(ad.matmul(ad.concat_cols(x, constant(pe)), self.pe_w), self.pe_b)

        for block in self.blocks:
            xn = block.norm_rec(x)
            states = self._cell_states(block, xn, t_len, batch, training, rng, h0_mode)
            rec = ad.mul(block.norm_inner(ad.add(ad.matmul(states, block.proj_w), block.proj_b)),
                         ad.sigmoid(ad.add(ad.matmul(xn, block.gate_w), block.gate_b)))
            x = ad.add(ad.mul(block.scale_rec, x), rec)
            xm = block.norm_mlp(x)
            x = ad.add(ad.mul(block.scale_mlp, x),
                       block.mlp(xm, training=training, rate=rate, rng=rng))

        yt = ad.add(ad.matmul(x, self.dec_w), self.dec_b)
        logits = ad.add(yt, self.dec_mlp(yt, training=training, rate=rate, rng=rng))
        if training:
            return logits  # flat (T*B, C) for the loss
        return logits.data.reshape(t_len, batch, cfg.n_classes).transpose(1, 0, 2)

    def _cell_states(self, block, xn, t_len, batch, training, rng, h0_mode):
        cfg = self.cfg
        params = block.cell.materialize()
        rate = cfg.dropout if training else 0.0
        steps = [ad.slice_rows(xn, t * batch, (t + 1) * batch) for t in range(t_len)]
        cellobj = C.CELL_KINDS[cfg.cell]
        if cfg.cell == "fq-bmru":
            if training and h0_mode == "train":
                u01 = constant(rng.uniform(0.0, 1.0, size=(batch, cfg.d)))
                h = ad.mul(ad.heaviside(ad.sub(u01, 0.5)), params.alpha)
            else:
                h = constant(np.zeros((batch, cfg.d)))
            out = []
            for x_t in steps:
                cand = C.fq_bmru_candidate(params, x_t,
                                           dropout_rate=rate if training else 0.0, rng=rng)
                h = C.fq_bmru_step_from_candidate(params, cand, h)
                out.append(h)
            return ad.stack_rows(out)
        if cfg.cell == "mingru":
            h = constant(np.zeros((batch, cfg.d)))
            out = []
            for x_t in steps:
                h = C.min_gru_step(params, x_t, h)
                out.append(h)
            return ad.stack_rows(out)
        # lru
        state = (constant(np.zeros((batch, cfg.d))), constant(np.zeros((batch, cfg.d))))
        out = []
        for x_t in steps:
            state, y = C.lru_step(params, x_t, state)
            out.append(y)
        return ad.stack_rows(out)
