"""File formats: CSV matrices, JSON configs/reports, manifests, raw samples.

CSV dialect: UTF-8, comma separator, LF line endings, one header row,
numbers printed with up to 17 significant digits so float64 values
round-trip exactly. Config files are JSON with exactly the dataclass field
names in snake_case; unknown keys are a hard error.

samples.bin layout (all little-endian): an 8-byte magic ``LBRRRST1``,
uint32 format version, uint32 reserved (16 bytes total), then six uint64
values [n_states, n_rows, n_covariates, n_targets, rank, noise_rank],
then per retained state the row-major float64 arrays
Psi (P, S1), Gamma (S1, K), phi_gamma (S1, K), delta (S1,), sigma_sq (K,),
followed by Omega (n_rows, S1) when n_rows > 0 and noise_rank == 0, or by
H (n_rows, S2), Lambda (S2, K), phi_lambda (S2, K), delta_noise (S2,) when
noise_rank > 0.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from latent_brrr.errors import ConfigurationError
from latent_brrr.model import ModelConfig, ModelState, PosteriorSamples, Variant
from latent_brrr.simulate import SimConfig
from latent_brrr.tuning import CvPlan

SAMPLES_MAGIC = b"LBRRRST1"
SAMPLES_VERSION = 1


# ---------------------------------------------------------------------------
# CSV matrices


def write_matrix_csv(path, matrix: np.ndarray, names: list[str] | None = None,
                     prefix: str = "c") -> None:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise ConfigurationError("can only write two-dimensional matrices")
    if names is None:
        names = [f"{prefix}{j}" for j in range(matrix.shape[1])]
    if len(names) != matrix.shape[1]:
        raise ConfigurationError("header length does not match column count")
    np.savetxt(path, matrix, fmt="%.17g", delimiter=",", newline="\n",
               header=",".join(names), comments="", encoding="utf-8")


def read_matrix_csv(path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        try:
            matrix = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ConfigurationError(f"malformed numeric data in {path}: {exc}") from exc
    names = header.split(",") if header else []
    if matrix.size and matrix.shape[1] != len(names):
        raise ConfigurationError(
            f"{path}: header has {len(names)} columns, data has {matrix.shape[1]}"
        )
    return matrix, names


def check_matrix_finite(matrix: np.ndarray, path, names: list[str] | None = None) -> None:
    """Reject non-finite entries, naming the first offending row and column."""
    bad = ~np.isfinite(matrix)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        column = names[c] if names and c < len(names) else str(c)
        raise ConfigurationError(
            f"non-finite value in {path} at row {r}, column {column}"
        )


# ---------------------------------------------------------------------------
# JSON


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON in {path}: {exc}") from exc


def _from_dict(cls, data: dict, what: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{what} must be a JSON object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - fields)
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {', '.join(unknown)}")
    return cls(**data)


def model_config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    if "variant" in data and not isinstance(data["variant"], Variant):
        try:
            data["variant"] = Variant(data["variant"])
        except ValueError:
            valid = ", ".join(v.value for v in Variant)
            raise ConfigurationError(
                f"unknown variant {data['variant']!r}; expected one of: {valid}"
            ) from None
    if "rank_grid" in data or "beta_grid" in data:
        raise ConfigurationError("unknown model_config keys: grids belong in the CV plan")
    return _from_dict(ModelConfig, data, "model config")


def model_config_to_dict(config: ModelConfig) -> dict:
    data = dataclasses.asdict(config)
    data["variant"] = config.variant.value
    return data


def sim_config_from_dict(data: dict) -> SimConfig:
    return _from_dict(SimConfig, dict(data), "simulation config")


def cv_plan_from_dict(data: dict) -> CvPlan:
    data = dict(data)
    for key in ("beta_grid", "rank_grid"):
        if key in data:
            data[key] = tuple(data[key])
    return _from_dict(CvPlan, data, "CV plan")


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# raw retained states


def _state_layout(state: ModelState) -> tuple[int, int]:
    if state.Omega is not None:
        return state.Omega.shape[0], 0
    if state.H is not None:
        return state.H.shape[0], state.H.shape[1]
    return 0, 0


def write_samples(path, samples: PosteriorSamples) -> None:
    states = samples.states
    if not states:
        raise ConfigurationError("no retained states to write")
    first = states[0]
    P, S1 = first.Psi.shape
    K = first.Gamma.shape[1]
    n_rows, S2 = _state_layout(first)
    with open(path, "wb") as fh:
        fh.write(SAMPLES_MAGIC)
        fh.write(struct.pack("<II", SAMPLES_VERSION, 0))
        fh.write(struct.pack("<6Q", len(states), n_rows, P, K, S1, S2))
        for state in states:
            blocks = [state.Psi, state.Gamma, state.phi_gamma, state.delta,
                      state.sigma_sq]
            if n_rows and S2 == 0:
                blocks.append(state.Omega)
            elif S2:
                blocks += [state.H, state.Lambda, state.phi_lambda, state.delta_noise]
            for block in blocks:
                fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_samples(path) -> tuple[ModelState, ...]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != SAMPLES_MAGIC:
            raise ConfigurationError(f"{path} is not a samples file (bad magic)")
        version, _ = struct.unpack("<II", fh.read(8))
        if version != SAMPLES_VERSION:
            raise ConfigurationError(f"unsupported samples format version {version}")
        n_states, n_rows, P, K, S1, S2 = struct.unpack("<6Q", fh.read(48))

        def read_array(shape):
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            return data.reshape(shape).astype(float)

        states = []
        for _ in range(n_states):
            Psi = read_array((P, S1))
            Gamma = read_array((S1, K))
            phi_gamma = read_array((S1, K))
            delta = read_array((S1,))
            sigma_sq = read_array((K,))
            Omega = H = Lam = phi_lambda = delta_noise = None
            if n_rows and S2 == 0:
                Omega = read_array((n_rows, S1))
            elif S2:
                H = read_array((n_rows, S2))
                Lam = read_array((S2, K))
                phi_lambda = read_array((S2, K))
                delta_noise = read_array((S2,))
            states.append(ModelState(
                Psi=Psi, Gamma=Gamma, phi_gamma=phi_gamma, delta=delta,
                sigma_sq=sigma_sq, Omega=Omega, H=H, Lambda=Lam,
                phi_lambda=phi_lambda, delta_noise=delta_noise,
            ))
    return tuple(states)


# ---------------------------------------------------------------------------
# run manifests


def write_manifest(path, command: str, config: dict, inputs: dict[str, str],
                   status: str, wall_time_seconds: float | None = None,
                   error: str | None = None, extras: dict | None = None) -> None:
    from latent_brrr import __version__

    payload = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "version": __version__,
        "status": status,
        "wall_time_seconds": wall_time_seconds,
    }
    if error is not None:
        payload["error"] = error
    if extras:
        payload.update(extras)
    write_json(path, payload)
