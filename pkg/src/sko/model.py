"""Decoder-only autoregressive LM with a pluggable attention mechanism.

Pre-norm blocks: x += attn(norm(x)); x += mlp(norm(x)).  The MLP is
D -> mlp_ratio*D -> D with GELU and no biases; positions are learned
absolute embeddings; the LM head is tied to the token embedding by default.
Initialization is normal(0, 0.02) for embeddings/projections, ones for
norm gains and kernel weights.
"""

import numpy as np

from .tensor import (Tensor, ShapeError, add, cross_entropy, embedding, gelu,
                     matmul, rmsnorm, transpose, get_default_dtype)
from .attention import SkoAttentionLayer, BaselineAttentionLayer, _init_weight

MECHANISMS = ("sko", "baseline")


class ModelConfig:
    """Hyperparameters of the language model (see field comments)."""

    def __init__(self, vocab_size, D, N, H, L, q=64, degrees=None,
                 mechanism="sko", tie_embeddings=True, mlp_ratio=4,
                 rms_eps=1e-6, seed=0, learn_degrees=False):
        self.vocab_size = int(vocab_size)   # token alphabet size
        self.D = int(D)                     # embedding width
        self.N = int(N)                     # maximum sequence length
        self.H = int(H)                     # attention heads
        self.L = int(L)                     # transformer blocks
        self.q = int(q)                     # kernel intrinsic dimension
        if degrees is None:
            degrees = [float(2 + i) for i in range(self.H)]
        self.degrees = [float(d) for d in degrees]
        self.mechanism = mechanism
        self.tie_embeddings = bool(tie_embeddings)
        self.mlp_ratio = int(mlp_ratio)
        self.rms_eps = float(rms_eps)
        self.seed = int(seed)
        self.learn_degrees = bool(learn_degrees)
        self.validate()

    def validate(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.D % self.H != 0:
            raise ValueError(f"D={self.D} not divisible by H={self.H}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}, "
                             f"got {self.mechanism!r}")
        if len(self.degrees) != self.H:
            raise ValueError(f"need {self.H} degrees, got {len(self.degrees)}")
        if any(d < 0 for d in self.degrees):
            raise ValueError(f"degrees must be >= 0: {self.degrees}")
        if min(self.N, self.L, self.mlp_ratio) < 1:
            raise ValueError("N, L and mlp_ratio must be positive")


class Block:
    def __init__(self, cfg: ModelConfig, rng, prefix):
        D = cfg.D
        dt = get_default_dtype()
        self.rms_eps = cfg.rms_eps
        self.ln1_gain = Tensor(np.ones(D, dtype=dt), requires_grad=True,
                               name=prefix + ".ln1.gain")
        if cfg.mechanism == "sko":
            self.attn = SkoAttentionLayer(
                D, cfg.H, cfg.q, cfg.degrees, rng, rms_eps=cfg.rms_eps,
                learnable_degrees=cfg.learn_degrees, prefix=prefix + ".attn")
        else:
            self.attn = BaselineAttentionLayer(D, cfg.H, rng,
                                               prefix=prefix + ".attn")
        self.ln2_gain = Tensor(np.ones(D, dtype=dt), requires_grad=True,
                               name=prefix + ".ln2.gain")
        self.fc1 = _init_weight(rng, (D, cfg.mlp_ratio * D), 0.02,
                                prefix + ".mlp.fc1")
        self.fc2 = _init_weight(rng, (cfg.mlp_ratio * D, D), 0.02,
                                prefix + ".mlp.fc2")

    def params(self):
        out = [self.ln1_gain]
        out.extend(self.attn.params())
        out.extend([self.ln2_gain, self.fc1, self.fc2])
        return out

    def forward(self, x):
        x = add(x, self.attn.forward(rmsnorm(x, self.ln1_gain, self.rms_eps)))
        h = gelu(matmul(rmsnorm(x, self.ln2_gain, self.rms_eps), self.fc1))
        return add(x, matmul(h, self.fc2))


class LanguageModel:
    """Token + position embeddings, L pre-norm blocks, tied LM head."""

    def __init__(self, cfg: ModelConfig, rng=None):
        cfg.validate()
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(
                np.random.SeedSequence(cfg.seed).spawn(4)[0])
        dt = get_default_dtype()
        self.tok_emb = _init_weight(rng, (cfg.vocab_size, cfg.D), 0.02,
                                    "tok_emb")
        self.pos_emb = _init_weight(rng, (cfg.N, cfg.D), 0.02, "pos_emb")
        self.blocks = [Block(cfg, rng, f"blocks.{i}") for i in range(cfg.L)]
        self.ln_f_gain = Tensor(np.ones(cfg.D, dtype=dt), requires_grad=True,
                                name="ln_f.gain")
        if cfg.tie_embeddings:
            self.lm_head = None
        else:
            self.lm_head = _init_weight(rng, (cfg.D, cfg.vocab_size), 0.02,
                                        "lm_head")

    def params(self):
        out = [self.tok_emb, self.pos_emb]
        for b in self.blocks:
            out.extend(b.params())
        out.append(self.ln_f_gain)
        if self.lm_head is not None:
            out.append(self.lm_head)
        names = [t.name for t in out]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names in model tree")
        return out

    def trainable(self):
        return [t for t in self.params() if t.requires_grad]

    def forward(self, tokens) -> Tensor:
        """tokens: int array (B, n), n <= N.  Returns logits (B, n, vocab)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be 2-D (B, n), got {tokens.shape}")
        n = tokens.shape[1]
        if n < 1 or n > self.cfg.N:
            raise ShapeError(f"sequence length {n} outside [1, {self.cfg.N}]")
        x = add(embedding(self.tok_emb, tokens),
                embedding(self.pos_emb, np.arange(n)))
        for b in self.blocks:
            x = b.forward(x)
        x = rmsnorm(x, self.ln_f_gain, self.cfg.rms_eps)
        if self.lm_head is not None:
            return matmul(x, self.lm_head)
        return matmul(x, transpose(self.tok_emb, (1, 0)))

    def loss(self, tokens_in, tokens_out) -> Tensor:
        return cross_entropy(self.forward(tokens_in), tokens_out)

    def generate(self, prompt, steps, temperature=0.0, rng=None):
        """Extend an int sequence by `steps` tokens.

        Greedy argmax at temperature 0; otherwise categorical sampling from
        softmax(logits / temperature) using the supplied generator.
        """
        prompt = np.asarray(prompt, dtype=np.int64)
        if prompt.ndim != 1 or prompt.size < 1:
            raise ShapeError("prompt must be a non-empty 1-D int sequence")
        if prompt.size + steps > self.cfg.N:
            raise ShapeError(
                f"prompt ({prompt.size}) + steps ({steps}) exceeds N={self.cfg.N}")
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        if temperature > 0 and rng is None:
            rng = np.random.default_rng(0)
        seq = prompt
        for _ in range(steps):
            logits = self.forward(seq[None, :]).data[0, -1]
            if temperature == 0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                z = z - z.max()
                p = np.exp(z)
                p /= p.sum()
                nxt = int(rng.choice(p.size, p=p))
            seq = np.append(seq, nxt)
        return seq

    def param_count(self) -> int:
        return sum(t.size for t in self.trainable())

    def param_report(self) -> dict:
        """Trainable scalars per component group."""
        groups = {"embeddings": 0, "attention": 0, "mlp": 0, "norms": 0,
                  "kernel": 0, "lm_head": 0}
        for t in self.trainable():
            name = t.name or ""
            if "kernel" in name:
                groups["kernel"] += t.size
            elif name.endswith("gain"):
                groups["norms"] += t.size
            elif ".mlp." in name:
                groups["mlp"] += t.size
            elif ".attn." in name:
                groups["attention"] += t.size
            elif name == "lm_head":
                groups["lm_head"] += t.size
            else:
                groups["embeddings"] += t.size
        groups["total"] = sum(groups.values())
        return groups
