"""Adam with decoupled weight decay, operating on named parameters.

The decay is applied multiplicatively (param <- param * (1 - lr * wd))
before the bias-corrected adaptive update, so regularization never enters
the moment estimates. Keeping names attached lets a bad gradient abort the
step with the offending parameter identified and nothing mutated.
"""

from __future__ import annotations

import numpy as np
import torch


class AdamW:
    def __init__(self, named_params, lr: float, betas: tuple[float, float] = (0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if isinstance(named_params, dict):
            named_params = named_params.items()
        self.params: dict[str, torch.Tensor] = dict(named_params)
        if not self.params:
            raise ValueError("optimizer needs at least one parameter")
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float | None = None) -> None:
        """Apply one update using each parameter's ``.grad`` (missing = zero).

        All gradients are validated first; a non-finite gradient aborts the
        whole step before any parameter or moment is touched.
        """
        lr = self.lr if lr is None else float(lr)
        for name, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise RuntimeError(f"non-finite gradient for parameter {name!r}; step aborted")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            if self.weight_decay:
                p.mul_(1.0 - lr * self.weight_decay)
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.beta1).add_(grad, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(grad, grad, value=1.0 - self.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-lr)

    # -- checkpointing ----------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"optim/m/{name}"] = self.m[name].detach().numpy().copy()
            out[f"optim/v/{name}"] = self.v[name].detach().numpy().copy()
        return out

    def state_meta(self) -> dict:
        return {
            "step_count": self.step_count,
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    def load_state(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        self.step_count = int(meta["step_count"])
        for name, p in self.params.items():
            for store, key in ((self.m, f"optim/m/{name}"), (self.v, f"optim/v/{name}")):
                if key not in tensors:
                    raise ValueError(f"optimizer state missing tensor {key!r}")
                arr = tensors[key]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(f"optimizer state {key!r} has shape {arr.shape}, "
                                     f"parameter has {tuple(p.shape)}")
                store[name] = torch.from_numpy(arr.copy()).to(p.dtype)
