"""Deterministic training loop: data, AdamW, cosine schedule, metrics.

Reproducibility contract: given one integer seed, four independent RNG
streams are split off (model init, train batches, validation batches,
generation).  Validation batches are drawn once up front and frozen, so the
reported val loss is noise-free across the run.  Checkpoints carry the
optimizer moments and the exact train-batch RNG state, so a resumed run
continues the uninterrupted trajectory bit-for-bit (64-bit mode).
"""

import json
import os
import re
import time

import numpy as np

from . import kernels
from .model import LanguageModel, ModelConfig
from .serialization import load_checkpoint, save_checkpoint
from .tensor import Tape


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss or gradient; message carries context."""


class TrainConfig:
    def __init__(self, lr_base=6e-4, lr_min=1e-5, weight_decay=0.1,
                 betas=(0.9, 0.95), adam_eps=1e-8, total_steps=5000,
                 eval_interval=500, batch_size=32, grad_clip=1.0, seed=0,
                 dataset="sample", val_fraction=0.1, eval_batches=20,
                 scheme="byte", vocab_file=None, merges_file=None):
        self.lr_base = float(lr_base)
        self.lr_min = float(lr_min)
        self.weight_decay = float(weight_decay)
        self.betas = (float(betas[0]), float(betas[1]))
        self.adam_eps = float(adam_eps)
        self.total_steps = int(total_steps)
        self.eval_interval = int(eval_interval)
        self.batch_size = int(batch_size)
        self.grad_clip = None if grad_clip is None else float(grad_clip)
        self.seed = int(seed)
        self.dataset = dataset
        self.val_fraction = float(val_fraction)
        self.eval_batches = int(eval_batches)
        self.scheme = scheme
        self.vocab_file = vocab_file
        self.merges_file = merges_file
        self.validate()

    def validate(self):
        if self.lr_min > self.lr_base:
            raise ValueError(f"lr_min {self.lr_min} > lr_base {self.lr_base}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if 0 < self.total_steps < self.eval_interval:
            raise ValueError(
                f"eval_interval {self.eval_interval} exceeds total_steps "
                f"{self.total_steps}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in [0, 1)")
        for b in self.betas:
            if not 0.0 < b < 1.0:
                raise ValueError(f"betas must lie in (0, 1), got {self.betas}")
        if self.eval_batches < 1:
            raise ValueError("eval_batches must be >= 1")
        if self.scheme not in ("byte", "vocab-file"):
            raise ValueError(f"unknown tokenizer scheme {self.scheme!r}")
        if self.scheme == "vocab-file" and not (self.vocab_file and
                                                self.merges_file):
            raise ValueError("vocab-file scheme needs vocab_file and "
                             "merges_file paths")


# ---------------------------------------------------------------------------
# tokenization

def _bytes_to_unicode():
    """GPT-2's reversible byte -> printable-unicode table."""
    bs = (list(range(ord("!"), ord("~") + 1)) +
          list(range(ord("\xa1"), ord("\xac") + 1)) +
          list(range(ord("\xae"), ord("\xff") + 1)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


# Close to GPT-2's pretokenizer; stdlib `re` has no \p{L}/\p{N}, so unicode
# letter/number classes are approximated ([^\W\d_] / \d).
_PRETOK = re.compile(
    r"'s|'t|'re|'ve|'m|'ll|'d| ?[^\W\d_]+| ?\d+| ?[^\s\w]+|\s+(?!\S)|\s+")


class BpeTokenizer:
    """Byte-pair encoder driven by an external vocab.json + merges.txt."""

    def __init__(self, vocab_file, merges_file):
        with open(vocab_file, "r", encoding="utf-8") as fh:
            self.encoder = json.load(fh)
        merges = []
        with open(merges_file, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) == 2:
                    merges.append(tuple(parts))
        self.bpe_ranks = {pair: i for i, pair in enumerate(merges)}
        self.byte_encoder = _bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        self.decoder = {i: piece for piece, i in self.encoder.items()}
        self._cache = {}

    @property
    def vocab_size(self):
        return len(self.encoder)

    def _bpe(self, token):
        if token in self._cache:
            return self._cache[token]
        word = tuple(token)
        while len(word) > 1:
            pairs = {(word[i], word[i + 1]) for i in range(len(word) - 1)}
            best = min(pairs, key=lambda p: self.bpe_ranks.get(p, 1 << 30))
            if best not in self.bpe_ranks:
                break
            first, second = best
            merged = []
            i = 0
            while i < len(word):
                if (i < len(word) - 1 and word[i] == first
                        and word[i + 1] == second):
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = tuple(merged)
        self._cache[token] = word
        return word

    def encode(self, text):
        ids = []
        for tok in _PRETOK.findall(text):
            mapped = "".join(self.byte_encoder[b] for b in tok.encode("utf-8"))
            for piece in self._bpe(mapped):
                if piece not in self.encoder:
                    raise ValueError(f"BPE piece {piece!r} missing from vocab")
                ids.append(self.encoder[piece])
        return ids

    def decode(self, ids):
        text = "".join(self.decoder[int(i)] for i in ids)
        data = bytes(self.byte_decoder[c] for c in text)
        return data.decode("utf-8", errors="replace")


def tokenize_corpus(path, scheme="byte", vocab_file=None, merges_file=None):
    """Read a text file into an int64 token array.

    byte: raw bytes, vocab 256.  vocab-file: BPE with the supplied
    vocab/merges pair.  Same file always yields the same stream.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise ValueError(f"empty corpus: {path}")
    if scheme == "byte":
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if scheme == "vocab-file":
        tok = BpeTokenizer(vocab_file, merges_file)
        return np.asarray(tok.encode(raw.decode("utf-8")), dtype=np.int64)
    raise ValueError(f"unknown tokenizer scheme {scheme!r}")


def split_tokens(tokens, val_fraction):
    """Single contiguous cut; the tail is validation.

    val_fraction == 0 hands the training stream to validation too — only
    sensible for memorization/overfit experiments, and flagged as such.
    """
    n_val = int(len(tokens) * val_fraction)
    if val_fraction > 0 and n_val == 0:
        raise ValueError("val_fraction too small: validation split is empty")
    if n_val == 0:
        return tokens, tokens
    return tokens[:-n_val], tokens[-n_val:]


class BatchSampler:
    """Uniform random windows of length N+1 -> (inputs, targets)."""

    def __init__(self, tokens, N, batch_size, rng):
        if len(tokens) < N + 1:
            raise ValueError(
                f"stream of {len(tokens)} tokens too short for N={N}")
        self.tokens = tokens
        self.N = N
        self.batch_size = batch_size
        self.rng = rng

    def draw(self):
        starts = self.rng.integers(0, len(self.tokens) - self.N,
                                   size=self.batch_size)
        seq = np.stack([self.tokens[s:s + self.N + 1] for s in starts])
        return seq[:, :-1], seq[:, 1:]


# ---------------------------------------------------------------------------
# optimization

def cosine_lr(step, total, lr_base, lr_min):
    """Cosine decay from lr_base at step 0 to lr_min at step == total."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr_base
    return lr_min + 0.5 * (lr_base - lr_min) * (
        1.0 + np.cos(np.pi * step / total))


def _no_decay(name):
    return name.endswith("gain") or ".kernel." in name


class AdamW:
    """Decoupled weight decay; norm gains and kernel params never decay."""

    def __init__(self, params, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1):
        names = [p.name for p in params]
        if None in names or len(set(names)) != len(names):
            raise ValueError("optimizer params need unique names")
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr):
        self.t += 1
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericAbort(f"non-finite gradient in {p.name}")
            wd = 0.0 if _no_decay(p.name) else self.weight_decay
            kernels.adamw_update(p.data, g, self.m[p.name], self.v[p.name],
                                 self.t, lr, self.beta1, self.beta2,
                                 self.eps, wd)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    total = float(np.sqrt(total))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoint plumbing

def _rng_state_kv(rng):
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generator state is checkpointable")
    return {
        "rng.state": str(st["state"]["state"]),
        "rng.inc": str(st["state"]["inc"]),
        "rng.has_uint32": str(st["has_uint32"]),
        "rng.uinteger": str(st["uinteger"]),
    }


def _rng_from_kv(kv):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(kv["rng.state"]), "inc": int(kv["rng.inc"])},
        "has_uint32": int(kv["rng.has_uint32"]),
        "uinteger": int(kv["rng.uinteger"]),
    }
    return rng


def save_train_checkpoint(path, flat_cfg, model, opt, step, best_val,
                          batch_rng):
    kv = {k: v for k, v in flat_cfg.items()}
    kv["state.step"] = step
    kv["state.best_val"] = float(best_val)
    kv.update(_rng_state_kv(batch_rng))
    tensors = {p.name: p.data for p in model.params()}
    if opt is not None:
        kv["state.opt_t"] = opt.t
        for name, arr in opt.m.items():
            tensors["opt.m." + name] = arr
        for name, arr in opt.v.items():
            tensors["opt.v." + name] = arr
    save_checkpoint(path, kv, tensors)


def restore_model(model, tensors):
    for p in model.params():
        if p.name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {p.name!r}")
        arr = tensors[p.name]
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {p.name!r}: "
                             f"{arr.shape} vs {p.data.shape}")
        p.data[...] = arr.astype(p.data.dtype)


def load_model_from_checkpoint(path):
    """Rebuild a LanguageModel (weights only) from a checkpoint file."""
    from .config import flat_from_checkpoint_kv, build_model_config
    kv, tensors = load_checkpoint(path)
    flat = flat_from_checkpoint_kv(kv)
    model = LanguageModel(build_model_config(flat))
    restore_model(model, tensors)
    return model, flat, kv


# ---------------------------------------------------------------------------
# the loop

def evaluate(model, batches):
    """Mean cross-entropy over a fixed batch list, no tape."""
    losses = [model.loss(x, y).item() for x, y in batches]
    return float(np.mean(losses))


def run_training(model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir,
                 flat_cfg=None, resume=None, log=None):
    """Train, writing metrics.csv and checkpoints under out_dir.

    Returns a summary dict.  `resume` is a checkpoint path produced by this
    function; the resumed trajectory is bit-identical to the uninterrupted
    one.  `flat_cfg` (the resolved flat config) is embedded in checkpoints
    so they are self-describing; when omitted a minimal one is derived.
    """
    from .config import flat_from_checkpoint_kv, resolve_dataset, SCHEMA

    os.makedirs(out_dir, exist_ok=True)
    say = log if log is not None else (lambda s: None)

    if flat_cfg is None:
        from .config import default_config
        flat_cfg = default_config()
        for key in SCHEMA:
            for src in (model_cfg, train_cfg):
                if hasattr(src, key):
                    flat_cfg[key] = getattr(src, key)
        flat_cfg["betas"] = list(train_cfg.betas)

    data_path = resolve_dataset(train_cfg.dataset)
    if not os.path.exists(data_path):
        raise FileNotFoundError(f"corpus not found: {data_path}")
    tokens = tokenize_corpus(data_path, train_cfg.scheme,
                             train_cfg.vocab_file, train_cfg.merges_file)
    if tokens.max() >= model_cfg.vocab_size:
        raise ValueError(
            f"corpus contains token id {int(tokens.max())} but vocab_size is "
            f"{model_cfg.vocab_size}")
    train_toks, val_toks = split_tokens(tokens, train_cfg.val_fraction)
    if train_cfg.val_fraction > 0:
        # the two sources must be disjoint slices of the stream
        assert len(train_toks) + len(val_toks) == len(tokens)
    else:
        say("warning: val_fraction=0, validation runs on the training stream")

    kids = np.random.SeedSequence(train_cfg.seed).spawn(4)
    model = LanguageModel(model_cfg, rng=np.random.default_rng(kids[0]))
    batch_rng = np.random.default_rng(kids[1])
    val_rng = np.random.default_rng(kids[2])

    sampler = BatchSampler(train_toks, model_cfg.N, train_cfg.batch_size,
                           batch_rng)
    val_sampler = BatchSampler(val_toks, model_cfg.N, train_cfg.batch_size,
                               val_rng)
    val_batches = [val_sampler.draw() for _ in range(train_cfg.eval_batches)]

    opt = AdamW(model.trainable(), betas=train_cfg.betas,
                eps=train_cfg.adam_eps, weight_decay=train_cfg.weight_decay)

    start_step = 0
    best_val = float("inf")
    if resume is not None:
        kv, tensors = load_checkpoint(resume)
        restore_model(model, tensors)
        for p in opt.params:
            for store, tag in ((opt.m, "opt.m."), (opt.v, "opt.v.")):
                key = tag + p.name
                if key not in tensors:
                    raise ValueError(f"checkpoint lacks optimizer state {key}")
                store[p.name][...] = tensors[key]
        opt.t = int(kv["state.opt_t"])
        start_step = int(kv["state.step"])
        best_val = float(kv["state.best_val"])
        batch_rng.bit_generator.state = _rng_from_kv(kv).bit_generator.state
        say(f"resumed from {resume} at step {start_step}")

    csv_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if (resume is not None and os.path.exists(csv_path)) else "w"
    csv = open(csv_path, mode, encoding="utf-8")
    if mode == "w":
        csv.write("step,train_loss,val_loss,val_ppl,lr,wall_time\n")

    t0 = time.monotonic()
    pending = None

    def write_row(step, train_loss, val_loss, lr):
        wall = time.monotonic() - t0
        csv.write("%d,%.17g,%.17g,%.17g,%.17g,%.6f\n"
                  % (step, train_loss, val_loss, np.exp(val_loss), lr, wall))
        csv.flush()

    def checkpoint(tag, step):
        path = os.path.join(out_dir, f"checkpoint_{tag}.skoc")
        save_train_checkpoint(path, flat_cfg, model, opt, step, best_val,
                              batch_rng)
        return path

    try:
        if train_cfg.total_steps == 0:
            checkpoint("init", 0)
            return {"csv": csv_path, "final_val_loss": None,
                    "final_checkpoint": os.path.join(
                        out_dir, "checkpoint_init.skoc"),
                    "steps": 0}

        val_loss = best_val if np.isfinite(best_val) else None
        if start_step == 0:
            # step-0 row: loss before any update, on the batch that the
            # first optimization step will consume (so the RNG stream stays
            # aligned between fresh and resumed runs).
            pending = sampler.draw()
            init_train = model.loss(*pending).item()
            init_val = evaluate(model, val_batches)
            best_val = min(best_val, init_val)
            val_loss = init_val
            write_row(0, init_train, init_val, train_cfg.lr_base)
            say(f"step 0 val_loss {init_val:.4f}")

        for step in range(start_step + 1, train_cfg.total_steps + 1):
            lr = float(cosine_lr(step, train_cfg.total_steps,
                                 train_cfg.lr_base, train_cfg.lr_min))
            x, y = pending if pending is not None else sampler.draw()
            pending = None
            with Tape() as tape:
                loss = model.loss(x, y)
                tape.backward(loss)
            train_loss = loss.item()
            if not np.isfinite(train_loss):
                raise NumericAbort(_diagnose(model, step, lr, train_loss))
            gnorm = (clip_grad_norm(opt.params, train_cfg.grad_clip)
                     if train_cfg.grad_clip else None)
            try:
                opt.step(lr)
            except NumericAbort as e:
                raise NumericAbort(_diagnose(model, step, lr, train_loss,
                                             str(e)))
            opt.zero_grad()

            if step % train_cfg.eval_interval == 0 \
                    or step == train_cfg.total_steps:
                val_loss = evaluate(model, val_batches)
                best_val = min(best_val, val_loss)
                write_row(step, train_loss, val_loss, lr)
                checkpoint("%06d" % step, step)
                gtxt = "" if gnorm is None else f" gnorm {gnorm:.3f}"
                say(f"step {step} train {train_loss:.4f} "
                    f"val {val_loss:.4f} lr {lr:.3e}{gtxt}")

        final_ckpt = checkpoint("final", train_cfg.total_steps)
        return {"csv": csv_path, "final_val_loss": val_loss,
                "best_val_loss": best_val, "final_checkpoint": final_ckpt,
                "steps": train_cfg.total_steps}
    finally:
        csv.close()


def _diagnose(model, step, lr, loss, extra=""):
    lines = [f"numeric abort at step {step}: loss={loss} lr={lr:.6g}"]
    if extra:
        lines.append(extra)
    for p in model.trainable():
        if p.grad is not None:
            gn = float(np.sqrt(np.sum(p.grad * p.grad)))
            lines.append(f"  grad_norm {p.name} = {gn:.6g}")
    return "\n".join(lines)
