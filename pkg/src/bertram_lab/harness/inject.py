"""Placing learned word vectors into an uncontextualized input sequence."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from ..core_math import DomainError


@dataclass
class InjectionPlan:
    """Inclusive token spans ``(start, end)`` with one vector each."""

    strategy: str = "replace"
    spans: list[tuple[int, int]] = field(default_factory=list)
    vectors: list[torch.Tensor] = field(default_factory=list)

    def validate(self, n: int) -> list[int]:
        if self.strategy not in ("replace", "slash"):
            raise DomainError(f"unknown injection strategy {self.strategy!r}")
        if len(self.spans) != len(self.vectors):
            raise DomainError("one vector per span required")
        order = sorted(range(len(self.spans)), key=lambda k: self.spans[k])
        prev_end = -1
        for k in order:
            i, j = self.spans[k]
            if not 0 <= i <= j < n:
                raise DomainError(f"span {(i, j)} outside a length-{n} sequence")
            if i <= prev_end:
                raise DomainError("overlapping injection spans")
            prev_end = j
        return order


def inject_replace(e: torch.Tensor, plan: InjectionPlan) -> torch.Tensor:
    """Collapse every span to its single vector."""
    order = plan.validate(e.shape[0])
    parts, cur = [], 0
    for k in order:
        i, j = plan.spans[k]
        parts += [e[cur:i], plan.vectors[k].to(e.dtype)[None]]
        cur = j + 1
    parts.append(e[cur:])
    return torch.cat(parts, dim=0)


def restore_replace(e_new: torch.Tensor, plan: InjectionPlan, e_original: torch.Tensor) -> torch.Tensor:
    """Undo :func:`inject_replace` given the original span contents."""
    order = plan.validate(e_original.shape[0])
    parts, cur_new, cur_old = [], 0, 0
    for k in order:
        i, j = plan.spans[k]
        keep = i - cur_old
        parts += [e_new[cur_new:cur_new + keep], e_original[i:j + 1]]
        cur_new += keep + 1
        cur_old = j + 1
    parts.append(e_new[cur_new:])
    return torch.cat(parts, dim=0)


def inject_slash(e: torch.Tensor, plan: InjectionPlan, slash: torch.Tensor,
                 max_len: int | None = None) -> torch.Tensor:
    """Insert ``slash, v`` after every span; crop to ``max_len`` keeping all spans.

    The first and last positions (``[CLS]``/``[SEP]``) are kept when cropping.
    """
    order = plan.validate(e.shape[0])
    parts, cur = [], 0
    lo = hi = None
    out_len = 0
    for k in order:
        i, j = plan.spans[k]
        parts += [e[cur:j + 1], slash.to(e.dtype)[None], plan.vectors[k].to(e.dtype)[None]]
        start_new = out_len + (i - cur)
        out_len += (j + 1 - cur) + 2
        lo = start_new if lo is None else lo
        hi = out_len - 1
        cur = j + 1
    parts.append(e[cur:])
    out = torch.cat(parts, dim=0)
    if max_len is None or out.shape[0] <= max_len:
        return out
    n = out.shape[0]
    body = max_len - 2
    if body < 1 or (lo is not None and (lo < 1 or hi > n - 2 or hi - lo + 1 > body)):
        raise DomainError("cannot crop the sequence without cutting an injected span")
    if lo is None:
        start = 1
    else:
        centre = (lo + hi) // 2
        start = min(max(1, centre - body // 2), lo)
        start = max(start, hi - body + 1)
        start = min(start, n - 1 - body)
    return torch.cat([out[:1], out[start:start + body], out[-1:]], dim=0)
