"""Toy pre-norm vision transformer in torch, architecturally identical to
the inference runtime that will consume the exported weights: conv patch
embedding, learned positional encodings, a CLS token, encoder blocks of
multi-head self-attention and an erf-GELU MLP (both pre-norm with
residuals), final LayerNorm, linear head on the CLS row."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
from torch import nn

LN_EPS = 1e-6


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 4
    mlp_hidden_dim: int = 256
    num_classes: int = 10

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_metadata(self) -> dict:
        meta = asdict(self)
        meta["layernorm_epsilon"] = LN_EPS
        meta["gelu"] = "erf"
        return meta


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        attn = scores.softmax(dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(mixed)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),  # exact erf form
            nn.Linear(hidden, dim),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class ToyViT(nn.Module):
    """token_corrupt_max > 0 enables a train-mode-only augmentation that
    replaces a few random patch tokens per sample with degraded versions
    (shrunk, noise-filled, or simplex-scale), so the classifier learns a
    CLS readout that survives isolated token damage. Inference behavior
    and the exported weights are unaffected."""

    def __init__(self, config: ToyConfig, token_corrupt_max: int = 0):
        super().__init__()
        self.config = config
        self.token_corrupt_max = token_corrupt_max
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_tokens + 1, d))
        self.blocks = nn.ModuleList(
            [Block(d, config.num_heads, config.mlp_hidden_dim) for _ in range(config.num_layers)]
        )
        self.final_ln = nn.LayerNorm(d, eps=LN_EPS)
        self.head = nn.Linear(d, config.num_classes)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)

    @staticmethod
    def _token_distinctiveness(x: torch.Tensor) -> torch.Tensor:
        """Per-(sample, position) JSD between the token's softmax image and
        the batch-mean distribution at that position; the same statistic
        the downstream anomaly detector thresholds, so corruption lands on
        the tokens that detector would pick."""
        p = torch.softmax(x[:, 1:].detach(), dim=-1)  # (b, N, d)
        q = p.mean(dim=0, keepdim=True)
        mid = 0.5 * (p + q)

        def ent(v):
            return -(v * torch.log(v.clamp_min(1e-12))).sum(dim=-1)

        return ent(mid) - 0.5 * ent(p) - 0.5 * ent(q).expand(p.shape[0], -1)

    def _corrupt_tokens(self, x: torch.Tensor) -> torch.Tensor:
        b, n_plus_1, d = x.shape
        # radius proxy for the energy cap: median token norm in this batch
        radius = x[:, 1:].detach().reshape(-1, d).norm(dim=1).median()
        distinct = self._token_distinctiveness(x)
        batch_idx, token_idx, replacements = [], [], []
        for i in range(b):
            k = int(torch.randint(0, self.token_corrupt_max + 1, ()).item())
            if torch.rand(()) < 0.7:
                rows = 1 + distinct[i].argsort(descending=True)[:k]
            else:
                rows = 1 + torch.randperm(n_plus_1 - 1)[:k]  # never the CLS row
            for t in rows:
                tok = x[i, t]
                subset = [s for s in (0, 1, 2) if torch.rand(()) < 0.5]
                if not subset:
                    subset = [int(torch.randint(0, 3, ()).item())]
                for s in [subset[j] for j in torch.randperm(len(subset))]:
                    if s == 0:  # energy cap
                        norm = tok.norm()
                        tok = torch.where(norm > radius, tok * (radius / norm), tok)
                    elif s == 1:  # random diagonal contraction
                        tok = tok * torch.empty(d).uniform_(-0.5, 0.5)
                    else:  # simplex collapse
                        tok = torch.softmax(tok, dim=0)
                batch_idx.append(i)
                token_idx.append(int(t))
                replacements.append(tok)
        if not batch_idx:
            return x
        out = x.clone()
        out[torch.tensor(batch_idx), torch.tensor(token_idx)] = torch.stack(replacements)
        return out

    def forward(self, images):
        b = images.shape[0]
        x = self.patch_embed(images).flatten(2).transpose(1, 2)  # (b, N, d), row-major grid
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        if self.training and self.token_corrupt_max > 0:
            x = self._corrupt_tokens(x)
        for block in self.blocks:
            x = block(x)
        return self.head(self.final_ln(x[:, 0]))


def export_tensors(model: ToyViT) -> dict:
    """State dict remapped to the runtime's tensor names, as numpy f32."""
    cfg = model.config
    out = {}
    conv_w = model.patch_embed.weight.detach()
    out["patch_embed.weight"] = conv_w.reshape(cfg.embed_dim, -1).numpy()
    out["patch_embed.bias"] = model.patch_embed.bias.detach().numpy()
    out["cls_token"] = model.cls_token.detach().reshape(-1).numpy()
    out["pos_embed"] = model.pos_embed.detach().reshape(cfg.num_tokens + 1, cfg.embed_dim).numpy()
    for i, block in enumerate(model.blocks):
        p = f"blocks.{i}."
        out[p + "ln1.weight"] = block.ln1.weight.detach().numpy()
        out[p + "ln1.bias"] = block.ln1.bias.detach().numpy()
        for proj in ("q", "k", "v", "out"):
            layer = getattr(block.attn, proj)
            out[p + f"attn.{proj}.weight"] = layer.weight.detach().numpy()
            out[p + f"attn.{proj}.bias"] = layer.bias.detach().numpy()
        out[p + "ln2.weight"] = block.ln2.weight.detach().numpy()
        out[p + "ln2.bias"] = block.ln2.bias.detach().numpy()
        out[p + "mlp.fc1.weight"] = block.mlp[0].weight.detach().numpy()
        out[p + "mlp.fc1.bias"] = block.mlp[0].bias.detach().numpy()
        out[p + "mlp.fc2.weight"] = block.mlp[2].weight.detach().numpy()
        out[p + "mlp.fc2.bias"] = block.mlp[2].bias.detach().numpy()
    out["final_ln.weight"] = model.final_ln.weight.detach().numpy()
    out["final_ln.bias"] = model.final_ln.bias.detach().numpy()
    out["head.weight"] = model.head.weight.detach().numpy()
    out["head.bias"] = model.head.bias.detach().numpy()
    return out
