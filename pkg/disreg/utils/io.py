"""Provides utilities for saving and loading models as single-file archives."""
from __future__ import annotations

import inspect
import io
import json
import logging
import os
import warnings
import zipfile
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__file__)

MODEL_JSON = "model.json"
PARAMS_DIR = "params/"


class IOMixIn:
    """Mixin class for model saving and loading.

    For proper usage, models should subclass nn.Module and IOMixIn and the `save_args` method should be called
    immediately after the `super().__init__()` call::

        super().__init__()
        self.save_args(locals(), kwargs)

    """

    #: Architecture tag written into the archive.
    arch: str = "unknown"

    def save_args(self, locals: dict, kwargs: dict | None = None) -> None:
        r"""Method to save args into a private _init_args variable.

        Args:
            locals: The result of locals().
            kwargs: kwargs passed to the class.
        """
        args = inspect.getfullargspec(self.__class__.__init__).args
        d = {k: v for k, v in locals.items() if k in args and k not in ("self", "__class__")}
        if kwargs is not None:
            d.update(kwargs)
        # Tuples are stored as lists in JSON and restored by the model constructors.
        self._init_args = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def save(self, path: str | Path, metadata: dict | None = None, makedirs: bool = True) -> Path:
        """Save model to one zip archive.

        The archive holds model.json (class, version, architecture tag, init args and metadata) and one
        ``params/<name>.npy`` little-endian float32 array per state entry.

        Args:
            path: Archive path.
            metadata: Any additional metadata, e.g. the resolved run configuration.
            makedirs: Whether to create the parent directory.

        Returns:
            The archive path.
        """
        path = Path(path)
        if makedirs:
            os.makedirs(path.parent, exist_ok=True)
        d = {
            "@class": self.__class__.__name__,
            "@module": self.__class__.__module__,
            "@model_version": getattr(self, "__version__", 0),
            "arch": self.arch,
            "init_args": self._init_args,
            "metadata": metadata,
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr(MODEL_JSON, json.dumps(d, default=lambda o: str(o), indent=4))
            for name, tensor in self.state_dict().items():  # type: ignore
                buf = io.BytesIO()
                np.save(buf, tensor.detach().cpu().numpy().astype("<f4"))
                zf.writestr(f"{PARAMS_DIR}{name}.npy", buf.getvalue())
        logger.info(f"Saved {self.arch} model to {path}")
        return path

    @classmethod
    def load(cls, path: str | Path, **kwargs):
        """Load a model from an archive.

        Args:
            path: Archive path.
            **kwargs: Init args overriding the stored ones.

        Returns: model_object.
        """
        model_data, state = _read_archive(Path(path))
        _check_ver(cls, model_data)
        d = {**model_data["init_args"], **kwargs}
        model = cls(**d)
        reference = model.state_dict()  # type: ignore
        missing = set(reference) - set(state)
        if missing:
            raise ValueError(f"Archive {path} lacks parameters: {sorted(missing)[:5]}")
        restored = {k: torch.from_numpy(v).to(reference[k].dtype) for k, v in state.items() if k in reference}
        model.load_state_dict(restored)  # type: ignore
        model.metadata = model_data.get("metadata")
        return model


def _read_archive(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    if not path.is_file():
        raise ValueError(f"No model archive found at {path}")
    with zipfile.ZipFile(path) as zf:
        model_data = json.loads(zf.read(MODEL_JSON))
        state = {}
        for name in zf.namelist():
            if name.startswith(PARAMS_DIR) and name.endswith(".npy"):
                state[name[len(PARAMS_DIR) : -len(".npy")]] = np.load(io.BytesIO(zf.read(name)))
    return model_data, state


def read_model_json(path: str | Path) -> dict:
    """Return the model.json block of an archive without building the model."""
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read(MODEL_JSON))


def load_model(path: str | Path, **kwargs):
    r"""Convenience method to load a model of any architecture from an archive.

    Args:
        path (str|path): Path to a saved model archive.
        **kwargs: Init args overriding the stored ones.

    Returns:
        model_object.
    """
    try:
        d = read_model_json(path)
        modname = d["@module"]
        classname = d["@class"]
        mod = __import__(modname, globals(), locals(), [classname], 0)
        cls_ = getattr(mod, classname)
        return cls_.load(path, **kwargs)
    except BaseException as err:
        raise ValueError(f"Bad serialized model at {path}. Re-export it with `dreg train`.") from err


def _check_ver(cls_, d: dict):
    """Check version of cls_ in current disreg against those noted in a model.json dict.

    Args:
        cls_: Class object.
        d: Dict from serialized json.

    Raises:
        UserWarning if the code is newer than the archive.
    """
    if getattr(cls_, "__version__", 0) > d.get("@model_version", 0):
        warnings.warn(
            "Incompatible model version detected! The code will continue to load the model but it is "
            "recommended that you retrain or re-export the archive, or increment @model_version in model.json "
            "if you are confident that the changes are not problematic.",
            UserWarning,
            stacklevel=2,
        )
