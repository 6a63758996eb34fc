"""Central-difference gradient probing for torch modules.

Every ReLU sign pattern and max-pool argmax is recorded.  A probe whose
+h or -h evaluation changes any of them straddles a kink, so the
central difference there is not a valid oracle; such probes are
rejected and another parameter is drawn.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

REL_FLOOR = 1e-7


class KinkRecorder:
    def __init__(self, model):
        self.patterns = []
        self.handles = []
        for m in model.modules():
            if isinstance(m, nn.ReLU):
                self.handles.append(m.register_forward_hook(self._relu))
            elif isinstance(m, nn.MaxPool2d):
                self.handles.append(m.register_forward_hook(self._pool))

    def _relu(self, module, inp, out):
        self.patterns.append((inp[0] > 0).detach().clone())

    def _pool(self, module, inp, out):
        _, idx = F.max_pool2d(inp[0].detach(), module.kernel_size, module.stride,
                              module.padding, return_indices=True)
        self.patterns.append(idx)

    def run(self, fn):
        self.patterns = []
        value = fn()
        return value, self.patterns

    def close(self):
        for h in self.handles:
            h.remove()


def _same(pa, pb):
    return len(pa) == len(pb) and all(torch.equal(a, b) for a, b in zip(pa, pb))


@dataclass
class ProbeReport:
    names: list
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    rejected: int

    @property
    def max_rel_err(self):
        return float(self.rel_err.max()) if len(self.rel_err) else float("nan")


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def probe_gradients(model, loss_fn, n_probes=200, h=1e-3, seed=0, max_tries=20000):
    """Compare autograd with central differences on randomly chosen scalar parameters.

    Parameter tensors are chosen uniformly (so small tensors such as BN
    shifts are not drowned out by large FC weights), then an element
    uniformly inside the tensor.
    """
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in params}
    rec = KinkRecorder(model)
    rng = np.random.default_rng(seed)
    names, ana, num, errs = [], [], [], []
    rejected = 0
    seen = set()
    try:
        with torch.no_grad():
            _, base_pattern = rec.run(loss_fn)
            tries = 0
            while len(names) < n_probes and tries < max_tries:
                tries += 1
                name, p = params[rng.integers(len(params))]
                flat = p.view(-1)
                i = int(rng.integers(flat.numel()))
                if (name, i) in seen:
                    continue
                seen.add((name, i))
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus, pat_plus = rec.run(loss_fn)
                flat[i] = orig - h
                f_minus, pat_minus = rec.run(loss_fn)
                flat[i] = orig
                if not (_same(pat_plus, base_pattern) and _same(pat_minus, base_pattern)):
                    rejected += 1
                    continue
                n_val = (float(f_plus) - float(f_minus)) / (2 * h)
                a_val = float(grads[name].view(-1)[i])
                names.append(f"{name}[{i}]")
                ana.append(a_val)
                num.append(n_val)
                errs.append(relative_error(a_val, n_val))
    finally:
        rec.close()
    return ProbeReport(names, np.array(ana), np.array(num), np.array(errs), rejected)


def randomize_batchnorm(model, seed=0):
    """Give every BN layer non-trivial affine parameters and running statistics."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                n = m.num_features
                m.weight.copy_(0.5 + torch.rand(n, generator=g, dtype=m.weight.dtype))
                m.bias.copy_(0.2 * torch.randn(n, generator=g, dtype=m.bias.dtype))
                m.running_mean.copy_(0.1 * torch.randn(n, generator=g, dtype=m.running_mean.dtype))
                m.running_var.copy_(0.5 + torch.rand(n, generator=g, dtype=m.running_var.dtype))
    return model
