"""Utils for training disreg models."""

from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING

import pytorch_lightning as pl
import torch
import torchmetrics

from disreg.layers import HistogramMIConfig
from disreg.metrics import batch_registration_metrics
from disreg.objective import LossWeights, ape_objective, elbo

if TYPE_CHECKING:
    from torch.optim import Optimizer

    from disreg.models import GroupwiseVAE, ResUNet


class RegistrationLightningModuleMixin:
    """Mix-in class implementing common functions for training."""

    def training_step(self, batch: dict, batch_idx: int):
        """Training step.

        Args:
            batch: Collated batch of groups.
            batch_idx: Batch index.

        Returns:
           Total loss.
        """
        results, batch_size = self.step(batch)  # type: ignore
        self.log_dict(  # type: ignore
            {f"train_{key}": val for key, val in results.items()},
            batch_size=batch_size,
            on_epoch=True,
            on_step=False,
            prog_bar=True,
            sync_dist=self.sync_dist,  # type: ignore
        )
        return results["Total_Loss"]

    def on_train_epoch_end(self):
        """Step scheduler every epoch."""
        sch = self.lr_schedulers()  # type: ignore
        if sch is not None:
            sch.step()

    def validation_step(self, batch: dict, batch_idx: int):
        """Validation step: loss components plus registration accuracy.

        Args:
            batch: Collated batch of groups.
            batch_idx: Batch index.
        """
        results, batch_size = self.step(batch)  # type: ignore
        transforms = self.model.register(batch["images"])  # type: ignore
        results.update(batch_registration_metrics(batch, transforms))
        self.log_dict(  # type: ignore
            {f"val_{key}": val for key, val in results.items()},
            batch_size=batch_size,
            on_epoch=True,
            on_step=False,
            prog_bar=True,
            sync_dist=self.sync_dist,  # type: ignore
        )
        return results["Total_Loss"]

    def configure_optimizers(self):
        """Configure optimizers."""
        if self.optimizer is None:  # type: ignore
            optimizer = torch.optim.Adam(
                self.parameters(),  # type: ignore
                lr=self.lr,  # type: ignore
                betas=self.betas,  # type: ignore
            )
        else:
            optimizer = self.optimizer  # type: ignore
        if self.scheduler is None:  # type: ignore
            return optimizer
        return [optimizer], [self.scheduler]  # type: ignore


class GroupwiseVAELightningModule(RegistrationLightningModuleMixin, pl.LightningModule):
    """A PyTorch.LightningModule maximizing the ELBO of a GroupwiseVAE."""

    def __init__(
        self,
        model: GroupwiseVAE,
        lambda_v: float = 20.0,
        beta_z: float = 4.0,
        sigma_x2: float = 0.02,
        beta_warmup_epochs: int = 0,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        optimizer: Optimizer | None = None,
        scheduler=None,
        sync_dist: bool = False,
        **kwargs,
    ):
        """
        Args:
            model: GroupwiseVAE to train.
            lambda_v: Velocity smoothness strength.
            beta_z: Structural KL weight after warm-up.
            sigma_x2: Image likelihood variance.
            beta_warmup_epochs: Epochs over which beta_z ramps up linearly; 0 disables the warm-up.
            lr: Learning rate.
            betas: Adam moment coefficients.
            optimizer: Optimizer replacing the default Adam.
            scheduler: Learning-rate scheduler, stepped every epoch.
            sync_dist: Whether to sync logging across devices.
            **kwargs: Passthrough to parent init.
        """
        super().__init__(**kwargs)
        self.model = model
        self.weights = LossWeights(lambda_v=lambda_v, beta_z=beta_z, sigma_x2=sigma_x2)
        self.beta_warmup_epochs = beta_warmup_epochs
        self.rmse = torchmetrics.MeanSquaredError(squared=False)
        self.lr = lr
        self.betas = tuple(betas)
        self.optimizer = optimizer
        self.scheduler = scheduler
        self.sync_dist = sync_dist
        self.save_hyperparameters(ignore=["model", "optimizer", "scheduler"])

    def current_beta_z(self) -> float:
        """beta_z scaled by the linear warm-up factor of the current epoch."""
        if self.beta_warmup_epochs <= 0:
            return self.weights.beta_z
        return self.weights.beta_z * min(1.0, (self.current_epoch + 1) / self.beta_warmup_epochs)

    def forward(self, x: torch.Tensor):
        return self.model(x)

    def step(self, batch: dict):
        """Args:
            batch: Collated batch of groups.

        Returns:
            results, batch_size
        """
        x = batch["images"]
        output = self(x)
        weights = LossWeights(self.weights.lambda_v, self.current_beta_z(), self.weights.sigma_x2)
        total, parts = elbo(output, x, weights)
        results = {
            "Total_Loss": total,
            "Reconstruction": parts["reconstruction"],
            "Velocity_KL": parts["velocity_kl"],
            "Structure_KL": parts["structure_kl"],
            "Recon_RMSE": self.rmse(output.reconstructions.detach(), x),
        }
        return results, x.shape[0]


class APELightningModule(RegistrationLightningModuleMixin, pl.LightningModule):
    """A PyTorch.LightningModule training a ResUNet with accumulated pairwise MI estimates."""

    def __init__(
        self,
        model: ResUNet,
        lambda_v: float = 20.0,
        num_bins: int = 32,
        kernel_sigma: float = 1.0,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        optimizer: Optimizer | None = None,
        scheduler=None,
        sync_dist: bool = False,
        **kwargs,
    ):
        """
        Args:
            model: ResUNet to train.
            lambda_v: Velocity smoothness strength.
            num_bins: Histogram bins of the MI estimator.
            kernel_sigma: Parzen kernel width in bins.
            lr: Learning rate.
            betas: Adam moment coefficients.
            optimizer: Optimizer replacing the default Adam.
            scheduler: Learning-rate scheduler, stepped every epoch.
            sync_dist: Whether to sync logging across devices.
            **kwargs: Passthrough to parent init.
        """
        super().__init__(**kwargs)
        self.model = model
        self.lambda_v = lambda_v
        self.mi_config = HistogramMIConfig(num_bins=num_bins, kernel_sigma=kernel_sigma)
        self.lr = lr
        self.betas = tuple(betas)
        self.optimizer = optimizer
        self.scheduler = scheduler
        self.sync_dist = sync_dist
        self.save_hyperparameters(ignore=["model", "optimizer", "scheduler"])

    def forward(self, x: torch.Tensor):
        return self.model(x)

    def step(self, batch: dict):
        """Args:
            batch: Collated batch of groups.

        Returns:
            results, batch_size
        """
        x = batch["images"]
        velocities, transforms = self(x)
        total, parts = ape_objective(x, velocities, transforms, self.lambda_v, self.mi_config)
        return {"Total_Loss": total, "APE": parts["ape"], "Smoothness": parts["smoothness"]}, x.shape[0]


class EpochLogWriter(pl.Callback):
    """Appends one JSON line of epoch-level metrics per training epoch."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def on_train_epoch_end(self, trainer: pl.Trainer, pl_module: pl.LightningModule) -> None:
        if trainer.sanity_checking:
            return
        row = {"epoch": trainer.current_epoch}
        row.update({k: float(v) for k, v in sorted(trainer.callback_metrics.items())})
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as f:
            f.write(json.dumps(row) + "\n")
