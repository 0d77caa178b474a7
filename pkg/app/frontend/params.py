from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.autodiff import DiffTensor, constant, reshape
from app.frontend.cochlea import CochlearParams, cochlear_forward, filterbank_for
from app.frontend.cortex import CorticalParams, cortical_forward, init_cortical

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "cortical", "frozen", "cnn")
FULL_LEARNABLE_COUNT = 212


@dataclass
class FrontendParams:
    """Named frontend tensors plus the ablation that decides which ones train.

    In the ``cnn`` ablation the cortical stage does not exist; its role is
    taken by a convolution stem owned by the backend.
    """

    cochlea: CochlearParams
    cortex: Optional[CorticalParams]
    ablation: str = "full"
    _learnable: tuple[str, ...] = field(default=(), init=False, repr=False)

    def __post_init__(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation '{self.ablation}', expected one of {', '.join(ABLATIONS)}")
        if (self.ablation == "cnn") != (self.cortex is None):
            raise ValueError("cortical parameters exist exactly when the ablation is not 'cnn'")
        self._learnable = tuple(learnable_names(self.ablation))
        for name, tensor in self.tensors().items():
            # frozen tensors stay off the tape unless a caller watches them explicitly
            tensor.requires_grad = name in self._learnable

    def tensors(self) -> dict[str, DiffTensor]:
        named = dict(self.cochlea.tensors())
        if self.cortex is not None:
            named.update(self.cortex.tensors())
        return named

    def learnable(self) -> dict[str, DiffTensor]:
        named = self.tensors()
        return {name: named[name] for name in self._learnable}

    def learnable_count(self) -> int:
        return sum(t.size for t in self.learnable().values())

    @property
    def out_channels(self) -> int:
        return 1 if self.cortex is None else self.cortex.scale.size


def learnable_names(ablation: str) -> list[str]:
    cochlear = ["cochlea.alpha", "cochlea.inhibition", "cochlea.tau"]
    cortical = ["cortex.scale", "cortex.rate"]
    if ablation == "full":
        return cochlear + cortical
    if ablation == "cortical":
        return cortical
    if ablation == "frozen":
        return []
    if ablation == "cnn":
        return cochlear
    raise ValueError(f"unknown ablation '{ablation}', expected one of {', '.join(ABLATIONS)}")


def init_frontend(ablation: str = "full", cortical_init: str = "log", seed: int = 0) -> FrontendParams:
    cortex = None if ablation == "cnn" else init_cortical(cortical_init, seed)
    params = FrontendParams(cochlea=CochlearParams.initial(), cortex=cortex, ablation=ablation)
    logger.debug(
        "frontend init: ablation=%s cortical_init=%s seed=%d learnable=%d",
        ablation,
        cortical_init,
        seed,
        params.learnable_count(),
    )
    return params


def frontend_forward(x, fp: FrontendParams, clip_support: bool = True) -> DiffTensor:
    """Waveform (or 1-D tensor) -> features (40, 129, T), or (1, 129, T) without a cortical stage."""
    samples = x if isinstance(x, DiffTensor) else constant(np.asarray(x.samples))
    spec = cochlear_forward(samples, filterbank_for(samples.shape[0]), fp.cochlea)
    if fp.cortex is None:
        return reshape(spec, (1,) + spec.shape)
    return cortical_forward(spec, fp.cortex, clip_support=clip_support)
