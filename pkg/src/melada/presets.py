"""Named configuration bundles.

``full`` keeps the full-size network (LSTM 256, classifier 100). ``desk``
shrinks the network and minibatch so an 8-fold LOSO run on the synthetic
benchmark fits in a few minutes on one core; every optimizer and schedule
setting is shared with ``full`` except the self-adaptation step size.
"""
from __future__ import annotations

from dataclasses import dataclass

from .adaptation import AdaptConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class Preset:
    hidden: int
    clf_hidden: int
    ctrl_hidden: int
    latent: int
    batch_per_domain: int
    adapt_lr: float

    def model(self, input_dim: int, n_classes: int = 3) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            hidden=self.hidden,
            clf_hidden=self.clf_hidden,
            n_classes=n_classes,
            ctrl_hidden=self.ctrl_hidden,
            latent=self.latent,
        )

    def train(self, **overrides) -> TrainConfig:
        return TrainConfig(batch_per_domain=self.batch_per_domain, **overrides)

    def adapt(self, steps: int = 10) -> AdaptConfig:
        return AdaptConfig(steps=steps, adapt_lr=self.adapt_lr)


PRESETS = {
    "full": Preset(hidden=256, clf_hidden=100, ctrl_hidden=128, latent=64, batch_per_domain=64, adapt_lr=1e-3),
    "desk": Preset(hidden=16, clf_hidden=32, ctrl_hidden=32, latent=16, batch_per_domain=32, adapt_lr=3e-2),
}
