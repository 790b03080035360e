"""Wall-clock scaling and retained-memory checks for both attention paths.

Timing uses a monotonic clock, two warmup calls, then the median of at
least five samples; when a single call is too fast for the timer, the
per-sample call count doubles until each sample comfortably exceeds the
clock resolution.  Memory is measured by auditing the buffers the code
actually holds (tape census in training mode, recurrence window in
inference mode), not process RSS, which says nothing about algorithmic
retention.
"""

import csv
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .attention import (BaselineAttentionLayer, SkoAttentionLayer,
                        baseline_forward, sko_forward)
from .tensor import Tape, Tensor, sum_to_scalar
from .ultraspherical import gate_matrix

MECHANISMS = ("sko", "baseline")

# fallback floor for one timing sample, in seconds
_MIN_SAMPLE_S = 1e-3


@dataclass
class BenchRow:
    mechanism: str
    N: int
    D: int
    H: int
    n_max: float
    repetitions: int          # total timed calls behind the median
    fwd_s: float              # median wall time per forward
    fwdbwd_s: float           # median wall time per forward+backward
    mem_bytes: int            # retained square-buffer bytes, training mode


@dataclass
class BenchReport:
    mechanism: str
    sweep: str                # which knob varied: "N" | "D" | "n_max"
    rows: list
    slope: float | None       # log-log fit exponent (N and D sweeps)
    r2: float | None          # affine-fit R^2 (n_max sweep)
    threads: int


def thread_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def pin_single_cpu() -> bool:
    """Restrict the process to one CPU; returns False where unsupported."""
    try:
        cpus = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(cpus)})
        return True
    except (AttributeError, OSError):
        return False


def _sample(fn, inner: int) -> float:
    t0 = time.perf_counter()
    for _ in range(inner):
        fn()
    return time.perf_counter() - t0


def median_time(fn, reps=5, warmup=2):
    """Median per-call seconds of fn(); returns (seconds, total timed calls).

    Warmup calls are excluded.  Each of the `reps` samples times `inner`
    consecutive calls, and `inner` doubles until one sample exceeds both
    the requested floor and 100x the timer resolution, so results stay
    meaningful for very fast functions.
    """
    reps = max(int(reps), 5)
    for _ in range(max(int(warmup), 2)):
        fn()
    res = time.get_clock_info("perf_counter").resolution
    floor = max(100.0 * res, _MIN_SAMPLE_S)
    inner = 1
    while _sample(fn, inner) < floor:
        inner *= 2
    samples = sorted(_sample(fn, inner) / inner for _ in range(reps))
    return samples[len(samples) // 2], reps * inner


def _build_layer(mechanism, D, H, n_max, q, rng):
    if mechanism == "sko":
        layer = SkoAttentionLayer(D, H, q=q, degrees=[float(n_max)] * H,
                                  rng=rng, prefix="bench")
        return layer, sko_forward
    if mechanism == "baseline":
        layer = BaselineAttentionLayer(D, H, rng=rng, prefix="bench")
        return layer, baseline_forward
    raise ValueError("unknown mechanism %r" % mechanism)


def time_point(mechanism, N, D, H=4, n_max=4.0, q=8, reps=5, seed=0):
    """Time one configuration; returns a BenchRow."""
    rng = np.random.default_rng(seed)
    layer, fwd = _build_layer(mechanism, D, H, n_max, q, rng)
    xdata = rng.normal(0.0, 1.0, size=(1, N, D))

    x_plain = Tensor(xdata)
    fwd_s, calls = median_time(lambda: fwd(x_plain, layer), reps=reps)

    x_grad = Tensor(xdata, requires_grad=True, name="x")
    leaves = layer.params() + [x_grad]

    def step():
        for p in leaves:
            p.zero_grad()
        with Tape() as tape:
            tape.backward(sum_to_scalar(fwd(x_grad, layer)))

    fwdbwd_s, _ = median_time(step, reps=reps)
    mem = memory_probe(mechanism, N, training=True, n_max=n_max, D=D, H=H,
                       q=q, seed=seed)
    return BenchRow(mechanism=mechanism, N=N, D=D, H=H, n_max=float(n_max),
                    repetitions=calls, fwd_s=fwd_s, fwdbwd_s=fwdbwd_s,
                    mem_bytes=mem)


# Per-sweep defaults put each measurement in a regime where the term under
# test dominates: the N sweep keeps D small so quadratic work leads, the D
# sweep drops to one head and a low degree so projection/score matmuls lead,
# and the n_max sweep holds a mid-size grid where the additive term shows.
_SWEEP_SETUP = {
    "N": {"values": (128, 256, 512, 1024), "N": 512, "D": 32, "H": 4,
          "n_max": 4.0},
    "D": {"values": (64, 128, 256, 512), "N": 512, "D": 32, "H": 1,
          "n_max": 2.0},
    "n_max": {"values": (2, 4, 8, 16), "N": 512, "D": 32, "H": 4,
              "n_max": 4.0},
}


def _check_geometric(values):
    if len(values) < 2:
        raise ValueError("sweep needs at least 2 points")
    ratios = []
    for a, b in zip(values, values[1:]):
        if b <= a:
            raise ValueError("sweep values must be strictly increasing")
        ratios.append(b / a)
    if max(ratios) > 2.0 * min(ratios):
        raise ValueError("sweep values must be roughly geometrically spaced")


def time_scaling(mechanism, sweep, values=None, N=None, D=None, H=None,
                 n_max=None, q=8, reps=5, seed=0) -> BenchReport:
    """Sweep one knob and fit how wall time scales with it.

    N and D sweeps report the log-log least-squares exponent; the n_max
    sweep reports the R^2 of an affine fit, since that term is additive.
    Knobs left at None take the tuned per-sweep defaults.
    """
    if sweep not in _SWEEP_SETUP:
        raise ValueError("sweep must be one of %s" % (tuple(_SWEEP_SETUP),))
    if sweep == "n_max" and mechanism != "sko":
        raise ValueError("the n_max sweep only applies to the sko mechanism")
    setup = _SWEEP_SETUP[sweep]
    N = setup["N"] if N is None else N
    D = setup["D"] if D is None else D
    H = setup["H"] if H is None else H
    n_max = setup["n_max"] if n_max is None else n_max
    values = [float(v) for v in (setup["values"] if values is None
                                 else values)]
    _check_geometric(values)

    rows = []
    for v in values:
        kw = {"N": N, "D": D, "H": H, "n_max": n_max}
        kw[sweep] = v
        kw["N"] = int(kw["N"])
        kw["D"] = int(kw["D"])
        rows.append(time_point(mechanism, q=q, reps=reps, seed=seed, **kw))

    vals = np.asarray(values, dtype=float)
    times = np.asarray([r.fwd_s for r in rows], dtype=float)
    slope = r2 = None
    if sweep == "n_max":
        a, b = np.polyfit(vals, times, 1)
        pred = a * vals + b
        ss_res = float(np.sum((times - pred) ** 2))
        ss_tot = float(np.sum((times - times.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    else:
        slope = float(np.polyfit(np.log(vals), np.log(times), 1)[0])
    return BenchReport(mechanism=mechanism, sweep=sweep, rows=rows,
                       slope=slope, r2=r2, threads=thread_count())


def _rolling_window_census(N, K, lam, seed=0):
    """Replay the inference-mode recurrence counting live N-square buffers.

    Mirrors the rolling kernel loop buffer-for-buffer and returns
    (peak live count, phi) so the caller can check the replay against the
    active backend's output.  The window holds at most the running sum and
    the last two recurrence terms.
    """
    rng = np.random.default_rng(seed)
    x = np.clip(rng.normal(0.0, 0.5, size=(N, N)), -1.0, 1.0)
    w = np.ones(K + 1)
    live = {}

    def census():
        return len({id(a) for a in live.values()})

    live["phi"] = np.full((N, N), w[0])
    peak = census()
    if K >= 1:
        live["r_prev2"] = np.ones((N, N))
        live["r_prev"] = x
        live["phi"] = live["phi"] + w[1] * x
        peak = max(peak, census())
    for k in range(2, K + 1):
        c1, c2 = kernels.recurrence_coeffs_scalar(k, lam)
        r_k = c1 * (x * live["r_prev"]) - c2 * live["r_prev2"]
        live["r_prev2"] = live["r_prev"]
        live["r_prev"] = r_k
        live["phi"] = live["phi"] + w[k] * r_k
        peak = max(peak, census())
    return peak, x, live["phi"]


def memory_probe(mechanism, N, training, n_max=5.0, D=32, H=2, q=8,
                 seed=0) -> int:
    """Bytes of N-square float64 buffers one attention forward retains.

    Training mode counts what the tape actually saved for backward; for
    the kernel mechanism that grows linearly with n_max.  Inference mode
    audits the rolling recurrence window, which stays at three buffers no
    matter the degree.
    """
    rng = np.random.default_rng(seed)
    per_buffer = N * N * 8
    if mechanism == "baseline":
        if not training:
            return per_buffer  # one attention matrix alive at a time
        layer = BaselineAttentionLayer(D, H, rng=rng, prefix="probe")
        x = Tensor(rng.normal(size=(1, N, D)), requires_grad=True)
        with Tape() as tape:
            baseline_forward(x, layer)
            count = tape.retained_square_buffers(N)
        return count * per_buffer
    if mechanism != "sko":
        raise ValueError("unknown mechanism %r" % mechanism)

    if training:
        layer = SkoAttentionLayer(D, H, q=q, degrees=[float(n_max)] * H,
                                  rng=rng, prefix="probe")
        x = Tensor(rng.normal(size=(1, N, D)), requires_grad=True)
        with Tape() as tape:
            sko_forward(x, layer)
            count = tape.retained_square_buffers(N, op="kernel")
        return count * per_buffer

    K = max(int(math.ceil(n_max)), 1)
    lam = (q - 1) / 2.0
    peak, x, phi = _rolling_window_census(N, K, lam, seed=seed)
    # the replay must agree with the backend it stands in for
    w = np.ones((1, K + 1))
    g = gate_matrix(np.array([K], dtype=float), K)
    ref = kernels.phi_rolling(x.reshape(1, 1, N, N), w, g, lam)
    if not np.allclose(phi, ref[0, 0], rtol=1e-12, atol=1e-12):
        raise RuntimeError("rolling-window replay diverged from the backend")
    return peak * per_buffer


def throughput_ratio(N=128, D=64, H=4, n_max=4.0, q=8, reps=5, seed=0):
    """Kernel-mechanism forward throughput relative to the baseline.

    Returns (ratio, sko_fwd_s, baseline_fwd_s); below 1.0 means the kernel
    path is slower.  Informational only; no threshold applies.
    """
    sko = time_point("sko", N=N, D=D, H=H, n_max=n_max, q=q, reps=reps,
                     seed=seed)
    base = time_point("baseline", N=N, D=D, H=H, n_max=n_max, q=q,
                      reps=reps, seed=seed)
    return base.fwd_s / sko.fwd_s, sko.fwd_s, base.fwd_s


def backend_compare(N=256, H=4, n_max=8.0, q=8, reps=5, seed=0):
    """Median rolling-kernel seconds for every importable backend."""
    rng = np.random.default_rng(seed)
    K = int(math.ceil(n_max))
    w = np.ones((H, K + 1))
    g = gate_matrix(np.full(H, float(n_max)), K)
    lam = (q - 1) / 2.0
    S = np.clip(rng.normal(0.0, 0.4, size=(1, H, N, N)), -1.0, 1.0)
    out = []
    for name in ("numpy", "numba"):
        try:
            be = kernels.get_backend(name)
        except ImportError:
            continue
        t, _ = median_time(lambda: be.phi_rolling(S, w, g, lam), reps=reps)
        out.append((name, t))
    return out


CSV_FIELDS = ("mechanism", "sweep", "N", "D", "H", "n_max", "repetitions",
              "fwd_s", "fwdbwd_s", "mem_bytes")


def write_reports_csv(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for rep in reports:
            for r in rep.rows:
                writer.writerow([r.mechanism, rep.sweep, r.N, r.D, r.H,
                                 "%g" % r.n_max, r.repetitions,
                                 "%.9g" % r.fwd_s, "%.9g" % r.fwdbwd_s,
                                 r.mem_bytes])


def format_summary(reports, ratio=None, backends=None):
    """Human-readable digest of sweep fits, throughput ratio, backends."""
    lines = []
    for rep in reports:
        head = "%s sweep over %s (threads=%d):" % (rep.mechanism, rep.sweep,
                                                   rep.threads)
        if rep.slope is not None:
            head += " log-log slope %.3f" % rep.slope
        if rep.r2 is not None:
            head += " affine fit R^2 %.4f" % rep.r2
        lines.append(head)
        for r in rep.rows:
            swept = {"N": r.N, "D": r.D, "n_max": r.n_max}[rep.sweep]
            lines.append("  %s=%-6g fwd %.3f ms   fwd+bwd %.3f ms   "
                         "retained %.1f KiB" %
                         (rep.sweep, swept, r.fwd_s * 1e3, r.fwdbwd_s * 1e3,
                          r.mem_bytes / 1024.0))
    if ratio is not None:
        rat, sko_s, base_s = ratio
        lines.append("throughput: sko %.3f ms/fwd, baseline %.3f ms/fwd "
                     "-> %.2fx baseline (informational)" %
                     (sko_s * 1e3, base_s * 1e3, rat))
    if backends:
        parts = ", ".join("%s %.3f ms" % (n, t * 1e3) for n, t in backends)
        lines.append("rolling kernel per backend: " + parts)
    return "\n".join(lines)
