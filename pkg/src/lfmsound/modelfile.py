"""JSON persistence of a trained model together with its front end."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .filterbank import ErbFilterbank
from .lfm_core import LfmParams, StateLayout
from .synthesis import CarrierModel, ModulatorModel

MODEL_VERSION = "lfmsound-model/1"


class ModelFileError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass(eq=False)
class ModelFile:
    params: LfmParams
    frame_rate: float
    initial_envelope: np.ndarray
    modulator: ModulatorModel
    filterbank: ErbFilterbank | None = None
    demod: dict = field(default_factory=dict)
    carriers: CarrierModel | None = None
    provenance: dict = field(default_factory=dict)
    version: str = MODEL_VERSION

    def __post_init__(self):
        self.initial_envelope = np.asarray(self.initial_envelope, dtype=float).ravel()
        self.validate()

    @property
    def layout(self) -> StateLayout:
        return self.params.layout()

    def validate(self):
        M = self.params.M
        if not self.version:
            raise ModelFileError("model file has no version tag")
        if self.initial_envelope.size != M:
            raise ModelFileError(f"initial envelope has {self.initial_envelope.size} channels, "
                                 f"parameters have {M}")
        if self.filterbank is not None and self.filterbank.n_channels != M:
            raise ModelFileError(f"filterbank has {self.filterbank.n_channels} channels, "
                                 f"parameters have {M}")
        if self.carriers is not None and self.carriers.sinusoid_freq.size != M:
            raise ModelFileError("carrier model and parameters disagree on channel count")
        if not self.frame_rate > 0:
            raise ModelFileError("frame_rate must be positive")

    def to_dict(self) -> dict:
        lay = self.layout
        return {
            "version": self.version,
            "layout": {"M": lay.M, "R": lay.R, "P": lay.P, "d": lay.d},
            "frame_rate": self.frame_rate,
            "params": self.params.to_dict(),
            "initial_envelope": self.initial_envelope.tolist(),
            "modulator": self.modulator.to_dict(),
            "filterbank": None if self.filterbank is None else self.filterbank.to_dict(),
            "demod": dict(self.demod),
            "carriers": None if self.carriers is None else self.carriers.to_dict(),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelFile":
        if d.get("version") != MODEL_VERSION:
            raise ModelFileError(f"unsupported model version {d.get('version')!r}")
        try:
            params = LfmParams.from_dict(d["params"])
            lay = d["layout"]
            if (lay["M"], lay["R"], lay["P"], lay["d"]) != (params.M, params.R, params.P, 2):
                raise ModelFileError("layout dimensions do not match the parameters")
            return cls(
                params=params,
                frame_rate=float(d["frame_rate"]),
                initial_envelope=np.array(d["initial_envelope"], dtype=float),
                modulator=ModulatorModel.from_dict(d["modulator"]),
                filterbank=None if d.get("filterbank") is None
                else ErbFilterbank.from_dict(d["filterbank"]),
                demod=dict(d.get("demod", {})),
                carriers=None if d.get("carriers") is None else CarrierModel.from_dict(d["carriers"]),
                provenance=dict(d.get("provenance", {})),
                version=d["version"],
            )
        except (KeyError, TypeError) as exc:
            raise ModelFileError(f"malformed model file: {exc!r}") from exc

    def __eq__(self, other):
        if not isinstance(other, ModelFile):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ModelFile":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        return cls.from_dict(d)
