"""Attacks on the split and statistical checks on what David observes.

* ``linear_equation_attack`` solves for a layer's weights from David's
  transcripts.  It succeeds on insecure runs and fails on masked ones.
* ``subspace_attack_k1`` recovers the hidden singular pair of a one-component
  split from the residual's null space.
* ``uniformity_distinguisher`` and ``mutual_information_check`` test masked
  payloads for uniformity and independence from the plaintext.
* ``restoration_attack`` fine-tunes the exposed model on public data and
  reports how much of the original quality comes back.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import protocol as P
from . import ring
from .decompose import split, svd, usefulness_ratio
from .errors import DegenerateError, DomainError, InsufficientSamples, RankDeficientError
from .models import Layer, ModelParams, apply_activation, softmax
from .schema import stamp

BROKEN = "broken"
RESISTED = "resisted"
RECOVERY_TOL = 1e-6
ALIGNMENT_TOL = 1e-8


@dataclass
class AttackReport:
    attack_name: str
    success_metric: float
    queries_used: int
    verdict: str
    metric_name: str = ""
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return stamp(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float)


# ---------------------------------------------------------------- linear equations


def _layer_pairs(transcript: P.Transcript, layer_id: int):
    """David's view of one layer: the payload he multiplied and the next
    payload that carries the layer's output."""
    entries = [m for _, m in transcript.entries]
    for pos, msg in enumerate(entries):
        if isinstance(msg, P.MaskedActivation) and msg.layer_id == layer_id:
            for later in entries[pos + 1:]:
                if (isinstance(later, P.InferenceOutput)
                        or (isinstance(later, P.PlainActivation) and later.layer_id == layer_id)
                        or (isinstance(later, P.MaskedActivation) and later.layer_id == layer_id + 1)):
                    return msg.vec, later.vec
    raise ValueError(f"transcript has no exchange for layer {layer_id}")


def linear_equation_attack(transcripts, layer_id: int, params: ring.RingParams, true_weight=None,
                           david_part=None, fit_bias=False):
    """Least-squares estimate of layer ``layer_id``'s weight from David's view.

    Each transcript contributes the vector David received for the layer and
    the layer output that came back to him.  On insecure runs these are the
    plaintext pair and the system is an ordinary regression; on secure runs
    the inputs are one-time-padded and the fit is meaningless.

    Returns ``(report, W_hat)``.  With ``david_part`` the report also carries
    the implied hidden part ``W_hat - W_D``.
    """
    xs, ys = [], []
    for t in transcripts:
        a_in, a_out = _layer_pairs(t, layer_id)
        xs.append(ring.dequantize(a_in, params).reshape(-1))
        ys.append(ring.dequantize(a_out, params).reshape(-1))
    X, Y = np.array(xs), np.array(ys)
    if fit_bias:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    n_unknown = X.shape[1]
    if X.shape[0] < n_unknown or np.linalg.matrix_rank(X) < n_unknown:
        raise RankDeficientError(f"{X.shape[0]} samples cannot determine {n_unknown} unknowns per row")
    sol, *_ = np.linalg.lstsq(X, Y, rcond=None)
    W_hat = sol[: n_unknown - int(fit_bias)].T
    details = {}
    if david_part is not None:
        details["hidden_part_norm"] = float(np.linalg.norm(W_hat - david_part))
    err = float("nan")
    if true_weight is not None:
        err = float(np.linalg.norm(W_hat - true_weight) / np.linalg.norm(true_weight))
    verdict = BROKEN if err <= RECOVERY_TOL else RESISTED
    report = AttackReport("linear_equation", err, len(xs), verdict, "relative_frobenius_error", details)
    return report, W_hat


# ---------------------------------------------------------------- subspace


def subspace_attack_k1(w_d, truth=None, rtol=1e-9):
    """Recover the hidden singular pair of a one-component split.

    For square full-rank ``W`` split with k = 1, the residual has a
    one-dimensional left and right null space, spanned by ``u_1`` and
    ``v_1``.  A larger null space leaves the hidden directions free within
    it and raises :class:`DegenerateError`.

    ``truth=(u1, v1)`` adds the alignment ``|cos|`` to the report.
    Returns ``(report, (u_hat, v_hat))``.
    """
    w_d = np.asarray(w_d, dtype=np.float64)
    m, n = w_d.shape
    if m != n:
        raise DomainError("the attack targets square matrices")
    U, S, V = svd(w_d)
    scale = S[0] if S[0] > 0 else 1.0
    null = S <= rtol * scale * n
    nullity = int(null.sum())
    if nullity != 1:
        raise DegenerateError(
            f"null space of the residual has dimension {nullity}; a unique hidden pair needs exactly 1",
            nullity=nullity,
            free_dims=n - nullity + 1,
        )
    u_hat, v_hat = U[:, null][:, 0], V[:, null][:, 0]
    metric, verdict, details = float("nan"), BROKEN, {"nullity": nullity}
    if truth is not None:
        cu = abs(float(u_hat @ truth[0])) / float(np.linalg.norm(truth[0]))
        cv = abs(float(v_hat @ truth[1])) / float(np.linalg.norm(truth[1]))
        details.update(cos_u=cu, cos_v=cv)
        metric = min(cu, cv)
        verdict = BROKEN if metric >= 1 - ALIGNMENT_TOL else RESISTED
    return AttackReport("subspace_k1", metric, 0, verdict, "abs_cosine", details), (u_hat, v_hat)


def sigma1_trace_estimate(w_d, trace_full: float, atol=1e-9) -> float:
    """``trace(W) - trace(W_D)`` as an estimate of the hidden singular value.

    The trace equals the sum of singular values only for symmetric positive
    semidefinite matrices, so anything else is rejected.
    """
    w_d = np.asarray(w_d, dtype=np.float64)
    if w_d.ndim != 2 or w_d.shape[0] != w_d.shape[1]:
        raise DomainError("matrix must be square")
    tol = atol * max(1.0, float(np.abs(w_d).max(initial=0.0)))
    if not np.allclose(w_d, w_d.T, atol=tol, rtol=0):
        raise DomainError("residual is not symmetric; trace and singular values only agree for symmetric PSD W")
    eig = np.linalg.eigvalsh(0.5 * (w_d + w_d.T))
    if eig.min(initial=0.0) < -tol * w_d.shape[0]:
        raise DomainError("residual has negative eigenvalues; trace and singular values only agree for PSD W")
    return float(trace_full - eig.sum())


# ---------------------------------------------------------------- statistics


def chi_square_uniformity(samples, modulus: int, bins: int | None = None):
    """Chi-square statistic and p-value of ``samples`` against uniform on ``[0, L)``.

    With ``bins < L`` residues are grouped into ``bins`` nearly equal
    ranges, which is how a large modulus is tested.
    """
    samples = np.asarray(samples).reshape(-1).astype(np.int64)
    bins = modulus if bins is None else int(bins)
    if samples.size < 100 * bins:
        raise InsufficientSamples(f"need at least {100 * bins} samples, got {samples.size}")
    if samples.size and (samples.min() < 0 or samples.max() >= modulus):
        raise DomainError("sample outside [0, L)")
    if bins != modulus:
        samples = np.minimum((samples / modulus * bins).astype(np.int64), bins - 1)
    counts = np.bincount(samples, minlength=bins)
    res = stats.chisquare(counts)
    return float(res.statistic), float(res.pvalue)


def uniformity_distinguisher(payloads, modulus: int, bins: int | None = None) -> float:
    """p-value of the uniformity test; small values mean David can tell."""
    return chi_square_uniformity(payloads, modulus, bins)[1]


def mutual_information(s_samples, masked_samples, modulus: int) -> float:
    """Plug-in mutual information, in bits, from the empirical joint table."""
    s = np.asarray(s_samples, dtype=np.int64).reshape(-1)
    t = np.asarray(masked_samples, dtype=np.int64).reshape(-1)
    if s.shape != t.shape:
        raise ValueError("paired samples must have the same length")
    joint = np.bincount(s * modulus + t, minlength=modulus * modulus).reshape(modulus, modulus)
    N = joint.sum()
    ps, pt = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    # integer products keep the exactly-independent case at exactly zero
    ratio = (joint[nz] * N) / (np.outer(ps, pt)[nz])
    return float(np.sum(joint[nz] / N * np.log2(ratio)))


def mi_bias_bound(modulus: int, n_samples: int, sigmas: float = 3.0) -> float:
    """Expected plug-in bias under independence plus ``sigmas`` standard deviations."""
    denom = 2 * n_samples * math.log(2)
    return modulus**2 / denom + sigmas * math.sqrt(2 * (modulus - 1) ** 2) / denom


def mutual_information_check(s_samples, masked_samples, modulus: int) -> float:
    if modulus > 31:
        raise DomainError("the plug-in estimate is only meaningful for small L (<= 31)")
    if np.size(s_samples) < modulus**2:
        raise InsufficientSamples(f"need at least {modulus ** 2} paired samples")
    return mutual_information(s_samples, masked_samples, modulus)


def exhaustive_mask_tables(modulus: int):
    """Joint counts of (plaintext, masked) over every plaintext and every pad.

    Returns ``(joint, marginal)`` as integer arrays.  A perfect pad gives
    ``marginal == L`` everywhere and ``joint * L**2 == outer(rows, cols)``.
    """
    s, r = np.meshgrid(np.arange(modulus), np.arange(modulus), indexing="ij")
    masked = (s + r) % modulus
    joint = np.zeros((modulus, modulus), dtype=np.int64)
    np.add.at(joint, (s.ravel(), masked.ravel()), 1)
    return joint, np.bincount(masked.ravel(), minlength=modulus)


def small_ring_parties(modulus=17, dim=1000, seed=0, secure=True, session_id=0):
    """A one-layer protocol over a tiny ring, for payload statistics.

    The weight is two unit rows, both hidden with Charlie, so the residual
    is zero and any binary input fits the ring.
    """
    params = ring.RingParams(modulus, 1)
    W = np.zeros((2, dim))
    W[0, 0] = W[1, 1] = 1.0
    model = ModelParams([Layer(W)], "mlp")
    decs = {0: split(W, 2)}
    return P.build_parties(model, decs, params, seed, secure=secure, session_id=session_id, auto_replenish=True)


def collect_masked_coordinates(modulus=17, dim=1000, runs=100, seed=0, secure=True, x=None):
    """Masked-activation payload coordinates from ``runs`` protocol runs.

    ``x`` defaults to a fixed binary vector, so insecure runs yield a
    constant payload.
    """
    charlie, david = small_ring_parties(modulus, dim, seed, secure)
    if x is None:
        x = (np.arange(dim) % 2).astype(float)
    out = []
    for _ in range(runs):
        t = P.Transcript()
        P.run_mlp_hybrid(charlie, david, x, transcript=t)
        out.extend(m.vec.values for m in t.of_type(P.MaskedActivation))
    return np.concatenate(out)


# ---------------------------------------------------------------- restoration


@dataclass
class EvalTask:
    """Synthetic labelled data with disjoint train, public and eval splits."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_public: np.ndarray
    y_public: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    loss: str = "cross_entropy"

    @property
    def n_classes(self):
        return int(max(self.y_train.max(), self.y_eval.max())) + 1


def make_task(n_in=16, n_classes=4, n_train=2000, n_public=1000, n_eval=1000, seed=0, loss="cross_entropy"):
    """Gaussian inputs labelled by a random two-layer teacher network."""
    rng = np.random.default_rng(seed)
    W1 = rng.normal(size=(32, n_in)) / np.sqrt(n_in)
    W2 = rng.normal(size=(n_classes, 32)) / np.sqrt(32)
    total = n_train + n_public + n_eval
    X = rng.normal(size=(total, n_in))
    logits = np.maximum(X @ W1.T, 0) @ W2.T
    y = logits.argmax(axis=1) if loss == "cross_entropy" else logits
    a, b = n_train, n_train + n_public
    return EvalTask(X[:a], y[:a], X[a:b], y[a:b], X[b:], y[b:], loss)


def _forward(layers, X):
    acts = [X]
    for W, bias, act in layers:
        z = acts[-1] @ W.T
        if bias is not None:
            z = z + bias
        acts.append(apply_activation(z, act) if act != "softmax" else z)
    return acts


def _risk_and_grad(layers, X, y, loss):
    acts = _forward(layers, X)
    out = acts[-1]
    N = X.shape[0]
    if loss == "cross_entropy":
        p = softmax(out)
        risk = float(-np.mean(np.log(p[np.arange(N), y] + 1e-300)))
        delta = p
        delta[np.arange(N), y] -= 1.0
        delta /= N
    else:
        diff = out - y
        risk = float(np.mean(np.sum(diff**2, axis=1)))
        delta = 2.0 * diff / N
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, bias, act = layers[i]
        if act == "relu" and i != len(layers) - 1:
            delta = delta * (acts[i + 1] > 0)
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0) if bias is not None else None)
        delta = delta @ W
    return risk, grads


def _as_layers(model: ModelParams):
    return [(l.weight.copy(), None if l.bias is None else l.bias.copy(), l.activation) for l in model.layers]


def _to_model(layers, template: ModelParams):
    return ModelParams([
        Layer(W, b, act, t.block, t.layer_type) for (W, b, act), t in zip(layers, template.layers)
    ], template.kind)


def risk(model: ModelParams, X, y, loss="cross_entropy") -> float:
    return _risk_and_grad(_as_layers(model), X, y, loss)[0]


def train(model: ModelParams, X, y, epochs=200, lr=0.1, loss="cross_entropy", callback=None) -> ModelParams:
    """Full-batch gradient descent on every weight and bias."""
    layers = _as_layers(model)
    for epoch in range(epochs):
        r, grads = _risk_and_grad(layers, X, y, loss)
        if callback is not None:
            callback(epoch, r, _to_model(layers, model))
        for i, (gW, gb) in enumerate(grads):
            W, b, act = layers[i]
            layers[i] = (W - lr * gW, None if b is None else b - lr * gb, act)
    return _to_model(layers, model)


def exposed_model(model: ModelParams, decompositions) -> ModelParams:
    """What David holds: residuals for split layers (whose biases stay with
    Charlie) and offloaded layers in full."""
    layers = []
    for i, l in enumerate(model.layers):
        dec = decompositions.get(i) if decompositions else None
        if dec is None:
            layers.append(l)
        else:
            layers.append(Layer(dec.david_part, None if l.bias is None else np.zeros_like(l.bias),
                                l.activation, l.block, l.layer_type))
    return ModelParams(layers, model.kind)


@dataclass
class RestorationReport:
    baseline_risk: float
    exposed_risk: float
    restored_risk: float
    kappa: float
    curve: list
    note: str = "surrogate for decomposition safety: kappa = baseline risk / restored risk"

    def to_dict(self):
        return stamp(asdict(self))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "public_risk", "eval_risk", "kappa"])
        for row in self.curve:
            w.writerow([row["epoch"], f"{row['public_risk']:.10g}", f"{row['eval_risk']:.10g}", f"{row['kappa']:.10g}"])
        return buf.getvalue()


def restoration_attack(exposed: ModelParams, task: EvalTask, epochs: int, baseline_risk: float,
                       lr: float = 0.05) -> RestorationReport:
    """Fine-tune David's exposed model on the public split.

    Every exposed weight and bias is trained by plain gradient descent.  The
    curve records, per epoch, the public-data risk and the eval risk before
    that epoch's update, plus a final row after the last update.
    """
    curve = []

    def record(epoch, public_risk, current):
        ev = risk(current, task.x_eval, task.y_eval, task.loss)
        curve.append({"epoch": epoch, "public_risk": public_risk, "eval_risk": ev,
                      "kappa": usefulness_ratio(baseline_risk, ev)})

    restored = train(exposed, task.x_public, task.y_public, epochs, lr, task.loss, callback=record)
    record(epochs, risk(restored, task.x_public, task.y_public, task.loss), restored)
    exposed_risk = curve[0]["eval_risk"]
    restored_risk = curve[-1]["eval_risk"]
    return RestorationReport(baseline_risk, exposed_risk, restored_risk,
                             usefulness_ratio(baseline_risk, restored_risk), curve)


def smoothed(values, window=5) -> np.ndarray:
    """Centered moving average with the window shrunk at the ends."""
    v = np.asarray(values, dtype=np.float64)
    half = window // 2
    c = np.concatenate([[0.0], np.cumsum(v)])
    lo = np.clip(np.arange(v.size) - half, 0, v.size)
    hi = np.clip(np.arange(v.size) + half + 1, 0, v.size)
    return (c[hi] - c[lo]) / (hi - lo)
