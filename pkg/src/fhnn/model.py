"""Multi-scale encoder/decoder forecaster and the two LSTM baselines.

The encoder (inverse model) reads the driver/response history at three
temporal resolutions: a fast bidirectional LSTM over every step, a medium
one over a stride-``m`` subsample of the fast per-step hidden pairs, and a
slow one over a stride-``s`` subsample of the concatenated medium+fast
pairs.  The three terminal embeddings feed an MLP that produces the latent
state ``z``, which initializes the decoder LSTM (forward model) unrolled
over the forecast drivers.

Subsampling keeps indices T-1, T-1-k, T-1-2k, ... so the most recent step
always reaches the coarser scales.  All forward passes retain caches so the
exact analytic gradient of the forecast MSE can be propagated back through
the decoder, the MLP, and all three scales, including the subsampling index
maps (gradients scatter back only to kept indices).

Batch layout: histories are (T, d, B) arrays, forecasts (K, d, B); the
single-window API is the B == 1 special case.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import cells
from .cells import LstmParams, LstmState, MlpParams
from .numerics import ParamSet, ShapeError, load_checkpoint, save_checkpoint

MODEL_KINDS = ("fhnn", "fhnn_single", "lstm", "lstm_ar")


@dataclass
class ModelConfig:
    """Architecture plus window geometry; embedded verbatim in checkpoints.

    d_x counts every driver column the model sees, including any basin
    one-hot block appended in global mode.  d_z doubles as the decoder
    hidden size; mlp_hidden defaults to d_z.
    """

    kind: str
    d_x: int
    t_in: int
    k_fcst: int
    h_enc: int = 11
    m: int = 4
    s: int = 28
    d_z: int = 32
    mlp_hidden: int = 0
    z_to_cell: bool = False

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}, expected one of {MODEL_KINDS}")
        if self.kind == "fhnn_single":
            self.m = 1
            self.s = 1
        if self.d_x < 1 or self.t_in < 1 or self.k_fcst < 1:
            raise ValueError(f"d_x, t_in, k_fcst must be positive, got {self.d_x}, {self.t_in}, {self.k_fcst}")
        if self.d_z < 1 or self.h_enc < 1:
            raise ValueError(f"h_enc and d_z must be positive, got {self.h_enc}, {self.d_z}")
        if self.kind == "fhnn":
            # m == s (notably m == s == 1) is tolerated as a structural
            # degenerate case; the normal configuration has m < s
            if not (1 <= self.m <= self.s):
                raise ValueError(f"strides must satisfy 1 <= m <= s, got m={self.m}, s={self.s}")
            if self.s > self.t_in:
                raise ValueError(f"slow stride s={self.s} exceeds input length T={self.t_in}")
        if self.mlp_hidden <= 0:
            self.mlp_hidden = self.d_z

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def downsample_indices(n_steps: int, stride: int) -> np.ndarray:
    """Kept original indices for stride subsampling, chronological order.

    Walks back from the final step: n-1, n-1-k, n-1-2k, ...; length is
    ceil(n/k), and the most recent step is always retained.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if n_steps < 1:
        raise ValueError(f"need at least one step, got {n_steps}")
    return np.arange(n_steps - 1, -1, -stride)[::-1].copy()


@dataclass
class LatentState:
    """Latent vector plus the per-scale hidden trajectories that produced it.

    Trajectories are the fwd+bwd summed hidden vectors per kept step,
    (steps, h_enc, B); original_indices maps each kept step back to its
    position on the input time axis.
    """

    z: np.ndarray  # (d_z, B)
    trajectories: dict[str, np.ndarray] = field(default_factory=dict)
    original_indices: dict[str, np.ndarray] = field(default_factory=dict)


def mse_loss(y_hat: np.ndarray, y_true: np.ndarray) -> float:
    """Mean squared error over forecast steps (and batch columns)."""
    if y_hat.shape != y_true.shape:
        raise ShapeError(f"loss shape mismatch: {y_hat.shape} vs {y_true.shape}")
    diff = y_hat - y_true
    return float(np.mean(diff * diff))


def mse_loss_grad(y_hat: np.ndarray, y_true: np.ndarray) -> tuple[float, np.ndarray]:
    if y_hat.shape != y_true.shape:
        raise ShapeError(f"loss shape mismatch: {y_hat.shape} vs {y_true.shape}")
    diff = y_hat - y_true
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def _as_batch(a: np.ndarray) -> np.ndarray:
    """Promote a single-window (T, d) array to (T, d, 1)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[:, :, None]
    return a


class Forecaster:
    """Shared surface for the three model families.

    Subclasses implement ``_forward`` (returning predictions plus caches)
    and ``_backward`` (accumulating parameter gradients).  Predictions and
    targets are in the caller's (normalized) units.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params = ParamSet()

    # -- single-window convenience -----------------------------------------

    def predict_window(self, x_hist, y_hist, x_fcst) -> np.ndarray:
        """(T, d_x), (T, 1), (K, d_x) -> (K, 1)."""
        y = self.predict_batch(_as_batch(x_hist), _as_batch(y_hist), _as_batch(x_fcst))
        return y[:, :, 0]

    # -- batch API -----------------------------------------------------------

    def predict_batch(self, x_hist, y_hist, x_fcst) -> np.ndarray:
        y_hat, _ = self._forward(x_hist, y_hist, x_fcst)
        return y_hat

    def loss_and_grads(self, x_hist, y_hist, x_fcst, y_fcst) -> float:
        """Forward, MSE against y_fcst, and full backward accumulation.
        Backward is skipped for a non-finite loss (the caller aborts)."""
        y_hat, cache = self._forward(x_hist, y_hist, x_fcst)
        loss, d_y = mse_loss_grad(y_hat, y_fcst)
        if np.isfinite(loss):
            self._backward(d_y, cache)
        return loss

    def loss_only(self, x_hist, y_hist, x_fcst, y_fcst) -> float:
        y_hat, _ = self._forward(x_hist, y_hist, x_fcst)
        return mse_loss(y_hat, y_fcst)

    def param_count(self) -> int:
        return self.params.n_scalars()

    def save(self, path, extra: dict | None = None) -> None:
        meta = dict(self.config.to_dict())
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.params, meta)

    def _forward(self, x_hist, y_hist, x_fcst):
        raise NotImplementedError

    def _backward(self, d_y_hat, cache):
        raise NotImplementedError


def _init_head(params: ParamSet, d_in: int, rng):
    bound = 1.0 / np.sqrt(d_in)
    w = params.add("head.w", rng.uniform(-bound, bound, size=(1, d_in)))
    b = params.add("head.b", np.zeros((1, 1)))
    return w, b


class FhnnForecaster(Forecaster):
    """Hierarchical three-scale encoder + latent-initialized decoder.

    kind == "fhnn_single" degenerates to one scale: a single bidirectional
    LSTM whose embedding alone feeds the latent MLP.
    """

    def __init__(self, config: ModelConfig, rng):
        super().__init__(config)
        if config.kind not in ("fhnn", "fhnn_single"):
            raise ValueError(f"FhnnForecaster cannot build kind {config.kind!r}")
        h = config.h_enc
        self.single = config.kind == "fhnn_single"
        self.fast_fwd = cells.init_lstm_params(self.params, "fast.fwd", config.d_x + 1, h, rng)
        self.fast_bwd = cells.init_lstm_params(self.params, "fast.bwd", config.d_x + 1, h, rng)
        if not self.single:
            self.med_fwd = cells.init_lstm_params(self.params, "medium.fwd", 2 * h, h, rng)
            self.med_bwd = cells.init_lstm_params(self.params, "medium.bwd", 2 * h, h, rng)
            self.slow_fwd = cells.init_lstm_params(self.params, "slow.fwd", 4 * h, h, rng)
            self.slow_bwd = cells.init_lstm_params(self.params, "slow.bwd", 4 * h, h, rng)
        mlp_in = h if self.single else 3 * h
        self.latent_mlp = cells.init_mlp_params(
            self.params, "latent_mlp", mlp_in, config.mlp_hidden, config.d_z, rng
        )
        self.decoder = cells.init_lstm_params(self.params, "decoder", config.d_x, config.d_z, rng)
        self.head_w, self.head_b = _init_head(self.params, config.d_z, rng)

    # -- encoder -------------------------------------------------------------

    def encode_batch(self, x_hist, y_hist):
        cfg = self.config
        T = x_hist.shape[0]
        if y_hist.shape[0] != T:
            raise ShapeError(f"history lengths differ: drivers {T}, response {y_hist.shape[0]}")
        if x_hist.shape[1] != cfg.d_x:
            raise ShapeError(f"driver dim {x_hist.shape[1]} != configured d_x {cfg.d_x}")
        if not self.single and T < cfg.s:
            raise ShapeError(f"history length {T} shorter than slow stride {cfg.s}")
        xy = np.concatenate([x_hist, y_hist], axis=1)
        fast = cells.bilstm_forward(xy, self.fast_fwd, self.fast_bwd)

        if self.single:
            z_in = fast.embedding
            z, mlp_cache = cells.mlp_forward(z_in, self.latent_mlp)
            state = LatentState(
                z=z,
                trajectories={"fast": fast.h_fwd + fast.h_bwd},
                original_indices={"fast": np.arange(T)},
            )
            cache = (T, fast, None, None, None, None, mlp_cache)
            return state, cache

        pairs_fast = np.concatenate([fast.h_fwd, fast.h_bwd], axis=1)  # (T, 2h, B)
        idx_m = downsample_indices(T, cfg.m)
        med = cells.bilstm_forward(pairs_fast[idx_m], self.med_fwd, self.med_bwd)
        pairs_med = np.concatenate([med.h_fwd, med.h_bwd], axis=1)  # (Tm, 2h, B)

        idx_s = downsample_indices(T, cfg.s)
        # medium step feeding each slow tick: same original index when m | s,
        # otherwise the latest medium tick at or before it (clamped to the oldest)
        med_pos = np.searchsorted(idx_m, idx_s, side="right") - 1
        np.clip(med_pos, 0, len(idx_m) - 1, out=med_pos)
        xs_slow = np.concatenate([pairs_med[med_pos], pairs_fast[idx_s]], axis=1)  # (Ts, 4h, B)
        slow = cells.bilstm_forward(xs_slow, self.slow_fwd, self.slow_bwd)

        z_in = np.concatenate([slow.embedding, med.embedding, fast.embedding], axis=0)
        z, mlp_cache = cells.mlp_forward(z_in, self.latent_mlp)
        state = LatentState(
            z=z,
            trajectories={
                "fast": fast.h_fwd + fast.h_bwd,
                "medium": med.h_fwd + med.h_bwd,
                "slow": slow.h_fwd + slow.h_bwd,
            },
            original_indices={"fast": np.arange(T), "medium": idx_m, "slow": idx_s},
        )
        cache = (T, fast, med, slow, idx_m, (idx_s, med_pos), mlp_cache)
        return state, cache

    def encode_window(self, x_hist, y_hist) -> LatentState:
        state, _ = self.encode_batch(_as_batch(x_hist), _as_batch(y_hist))
        return state

    def _encode_backward(self, d_z, cache):
        T, fast, med, slow, idx_m, slow_idx, mlp_cache = cache
        h = self.config.h_enc
        d_z_in = cells.mlp_backward(d_z, mlp_cache, self.latent_mlp)

        if self.single:
            zeros = np.zeros_like(fast.h_fwd)
            cells.bilstm_backward(fast, zeros, zeros, d_z_in, self.fast_fwd, self.fast_bwd)
            return

        idx_s, med_pos = slow_idx
        d_emb_slow = d_z_in[:h]
        d_emb_med = d_z_in[h : 2 * h]
        d_emb_fast = d_z_in[2 * h :]

        zeros_slow = np.zeros_like(slow.h_fwd)
        d_xs_slow = cells.bilstm_backward(slow, zeros_slow, zeros_slow, d_emb_slow, self.slow_fwd, self.slow_bwd)

        batch = fast.h_fwd.shape[2]
        d_pairs_med = np.zeros((len(idx_m), 2 * h, batch))
        if np.unique(med_pos).size == med_pos.size:
            d_pairs_med[med_pos] += d_xs_slow[:, : 2 * h]
        else:
            np.add.at(d_pairs_med, med_pos, d_xs_slow[:, : 2 * h])
        d_pairs_fast = np.zeros((T, 2 * h, batch))
        d_pairs_fast[idx_s] += d_xs_slow[:, 2 * h :]

        d_xs_med = cells.bilstm_backward(
            med, d_pairs_med[:, :h], d_pairs_med[:, h:], d_emb_med, self.med_fwd, self.med_bwd
        )
        d_pairs_fast[idx_m] += d_xs_med

        cells.bilstm_backward(
            fast, d_pairs_fast[:, :h], d_pairs_fast[:, h:], d_emb_fast, self.fast_fwd, self.fast_bwd
        )

    # -- decoder -------------------------------------------------------------

    def decode_batch(self, z, x_fcst):
        cfg = self.config
        if x_fcst.shape[0] == 0:
            raise ShapeError("decoder needs at least one forecast step")
        if z.shape[0] != cfg.d_z:
            raise ShapeError(f"latent dim {z.shape[0]} != decoder hidden {cfg.d_z}")
        c0 = z if cfg.z_to_cell else np.zeros_like(z)
        init = LstmState(h=z, c=c0)
        hs, _, caches = cells.lstm_sequence(x_fcst, init, self.decoder)
        K, _, B = x_fcst.shape
        y_hat = np.empty((K, 1, B))
        w = self.head_w.value
        b = self.head_b.value
        for k in range(K):
            y_hat[k] = w @ hs[k] + b
        return y_hat, (hs, caches)

    def _decode_backward(self, d_y_hat, dec_cache):
        hs, caches = dec_cache
        K = d_y_hat.shape[0]
        d_hs = np.empty_like(hs)
        w = self.head_w.value
        for k in range(K):
            self.head_w.grad += d_y_hat[k] @ hs[k].T
            self.head_b.grad += d_y_hat[k].sum(axis=1, keepdims=True)
            d_hs[k] = w.T @ d_y_hat[k]
        _, d_init = cells.lstm_sequence_backward(d_hs, None, caches, self.decoder)
        d_z = d_init.h
        if self.config.z_to_cell:
            d_z = d_z + d_init.c
        return d_z

    # -- full pass -----------------------------------------------------------

    def _forward(self, x_hist, y_hist, x_fcst):
        state, enc_cache = self.encode_batch(x_hist, y_hist)
        y_hat, dec_cache = self.decode_batch(state.z, x_fcst)
        return y_hat, (enc_cache, dec_cache)

    def _backward(self, d_y_hat, cache):
        enc_cache, dec_cache = cache
        d_z = self._decode_backward(d_y_hat, dec_cache)
        self._encode_backward(d_z, enc_cache)


class LstmBaselineForecaster(Forecaster):
    """Single LSTM over the concatenated history+horizon drivers; the
    response never enters.  The head reads the last K hidden states."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__(config)
        self.cell = cells.init_lstm_params(self.params, "lstm", config.d_x, config.d_z, rng)
        self.head_w, self.head_b = _init_head(self.params, config.d_z, rng)

    def _forward(self, x_hist, y_hist, x_fcst):
        xs = np.concatenate([x_hist, x_fcst], axis=0)
        B = xs.shape[2]
        hs, _, caches = cells.lstm_sequence(xs, cells.zero_state(self.config.d_z, B), self.cell)
        K = x_fcst.shape[0]
        y_hat = np.empty((K, 1, B))
        w, b = self.head_w.value, self.head_b.value
        for k in range(K):
            y_hat[k] = w @ hs[len(x_hist) + k] + b
        return y_hat, (hs, caches, len(x_hist))

    def _backward(self, d_y_hat, cache):
        hs, caches, T = cache
        d_hs = np.zeros_like(hs)
        w = self.head_w.value
        for k in range(d_y_hat.shape[0]):
            self.head_w.grad += d_y_hat[k] @ hs[T + k].T
            self.head_b.grad += d_y_hat[k].sum(axis=1, keepdims=True)
            d_hs[T + k] = w.T @ d_y_hat[k]
        cells.lstm_sequence_backward(d_hs, None, caches, self.cell)


class LstmArForecaster(Forecaster):
    """Autoregressive LSTM: each input step is [drivers; previous response].

    During history the lagged response is observed; over the horizon the
    model free-runs on its own previous prediction, seeded with the last
    observed value.  With teacher_forcing=True the horizon instead receives
    the observed next-step-lagged response (training-time option), which
    cuts the feedback path.
    """

    def __init__(self, config: ModelConfig, rng):
        super().__init__(config)
        self.cell = cells.init_lstm_params(self.params, "lstm_ar", config.d_x + 1, config.d_z, rng)
        self.head_w, self.head_b = _init_head(self.params, config.d_z, rng)
        self.teacher_forcing = False

    def _forward(self, x_hist, y_hist, x_fcst, y_fcst=None):
        if self.teacher_forcing and y_fcst is None:
            raise ValueError("teacher forcing needs the observed horizon response")
        T, _, B = x_hist.shape
        K = x_fcst.shape[0]
        H = self.config.d_z
        state = cells.zero_state(H, B)
        caches = []
        hs = np.empty((T + K, H, B))
        for t in range(T):
            y_lag = y_hist[t - 1] if t > 0 else y_hist[0]
            u = np.concatenate([x_hist[t], y_lag], axis=0)
            state, cache = cells.lstm_cell_forward(u, state, self.cell)
            hs[t] = state.h
            caches.append(cache)
        w, b = self.head_w.value, self.head_b.value
        y_hat = np.empty((K, 1, B))
        prev = y_hist[T - 1]
        for k in range(K):
            if self.teacher_forcing and k > 0:
                prev = y_fcst[k - 1]
            u = np.concatenate([x_fcst[k], prev], axis=0)
            state, cache = cells.lstm_cell_forward(u, state, self.cell)
            hs[T + k] = state.h
            caches.append(cache)
            y_hat[k] = w @ state.h + b
            prev = y_hat[k]
        return y_hat, (hs, caches, T, K)

    def loss_and_grads(self, x_hist, y_hist, x_fcst, y_fcst) -> float:
        y_hat, cache = self._forward(x_hist, y_hist, x_fcst, y_fcst)
        loss, d_y = mse_loss_grad(y_hat, y_fcst)
        if np.isfinite(loss):
            self._backward(d_y, cache)
        return loss

    def loss_only(self, x_hist, y_hist, x_fcst, y_fcst) -> float:
        y_hat, _ = self._forward(x_hist, y_hist, x_fcst, y_fcst)
        return mse_loss(y_hat, y_fcst)

    def _backward(self, d_y_hat, cache):
        hs, caches, T, K = cache
        B = hs.shape[2]
        w = self.head_w.value
        dh_next = np.zeros((self.config.d_z, B))
        dc_next = np.zeros_like(dh_next)
        d_feedback = None  # gradient flowing into the previous step's prediction
        for t in range(T + K - 1, -1, -1):
            dh = dh_next
            dc = dc_next
            if t >= T:
                k = t - T
                dp = d_y_hat[k].copy()
                if d_feedback is not None:
                    dp += d_feedback
                self.head_w.grad += dp @ hs[t].T
                self.head_b.grad += dp.sum(axis=1, keepdims=True)
                dh = dh + w.T @ dp
            dx, dh_next, dc_next = cells.lstm_cell_backward(dh, dc, caches[t], self.cell)
            # free-running feedback: the response slot of this step's input was
            # the previous horizon prediction (observed data gets no gradient)
            if not self.teacher_forcing and t > T:
                d_feedback = dx[-1:]
            else:
                d_feedback = None


def build_forecaster(config: ModelConfig, seed: int | np.random.Generator = 0) -> Forecaster:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng([int(seed), 0x1])
    if config.kind in ("fhnn", "fhnn_single"):
        return FhnnForecaster(config, rng)
    if config.kind == "lstm":
        return LstmBaselineForecaster(config, rng)
    if config.kind == "lstm_ar":
        return LstmArForecaster(config, rng)
    raise ValueError(f"unknown model kind {config.kind!r}")


def load_forecaster(path) -> Forecaster:
    """Rebuild a forecaster from a checkpoint; validates the dimension chain."""
    loaded, meta = load_checkpoint(path)
    config = ModelConfig.from_dict({k: meta[k] for k in ModelConfig.__dataclass_fields__ if k in meta})
    fc = build_forecaster(config, seed=0)
    fc.params.load_values(loaded.copy_values())
    return fc
