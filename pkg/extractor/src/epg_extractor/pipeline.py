"""Extraction orchestration: inputs -> embedding file, per mode.

Modes:
  clip-image      one 768-dim unit row (float16) per image path
  clip-text       one 768-dim unit row (float16) per text string
  loc-features    raw per-patch value features (float32), one row per
                  patch with the image id repeated, for vocabulary fitting
  loc-descriptor  compact localization rows: dumps loc-features, then
                  delegates VLAD + PCA to the primary `epg aggregate`
                  command with the given artifact files, so the numeric
                  pipeline has exactly one implementation

The output always lands at ``out_path`` in the embedding wire format.
"""

import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from .backends import ClipBackend, DinoBackend
from .embfile import read_embeddings, write_embeddings

MODES = ("clip-image", "clip-text", "loc-features", "loc-descriptor")


@dataclass(frozen=True)
class ExtractRequest:
    mode: str
    inputs: list
    out_path: str
    vocab_path: str = None
    pca_path: str = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}' (choose from {', '.join(MODES)})")
        if not self.inputs:
            raise ValueError("no inputs given")
        if self.mode == "loc-descriptor" and not (self.vocab_path and self.pca_path):
            raise ValueError("loc-descriptor needs --vocab and --pca artifact files")


def _check_readable(paths):
    for p in paths:
        if not os.path.isfile(p):
            raise FileNotFoundError(f"input not readable: {p}")


def _primary_cli():
    exe = os.environ.get("EPG_CLI", shutil.which("epg"))
    if not exe:
        raise RuntimeError(
            "primary `epg` command not found on PATH (needed for loc-descriptor aggregation)"
        )
    return exe


def _dump_features(dino, paths, out_path):
    ids, rows = [], []
    for p in paths:
        feats = dino.patch_features(p)
        ids += [p] * feats.shape[0]
        rows.append(feats)
    write_embeddings(out_path, ids, np.vstack(rows).astype(np.float32))


def extract(request, clip=None, dino=None):
    """Run one extraction request; returns (ids, matrix) as written."""
    if request.mode == "clip-text":
        clip = clip or ClipBackend()
        write_embeddings(request.out_path, request.inputs, clip.embed_texts(request.inputs))
    elif request.mode == "clip-image":
        _check_readable(request.inputs)
        clip = clip or ClipBackend()
        write_embeddings(request.out_path, request.inputs, clip.embed_images(request.inputs))
    elif request.mode == "loc-features":
        _check_readable(request.inputs)
        dino = dino or DinoBackend()
        _dump_features(dino, request.inputs, request.out_path)
    else:  # loc-descriptor
        _check_readable(request.inputs)
        for artifact in (request.vocab_path, request.pca_path):
            if not os.path.isfile(artifact):
                raise FileNotFoundError(f"artifact not readable: {artifact}")
        dino = dino or DinoBackend()
        exe = _primary_cli()
        with tempfile.TemporaryDirectory() as tmp:
            feat_path = os.path.join(tmp, "features.emb")
            _dump_features(dino, request.inputs, feat_path)
            proc = subprocess.run(
                [exe, "aggregate", "--features", feat_path, "--vocab", request.vocab_path,
                 "--pca", request.pca_path, "--out", request.out_path],
                capture_output=True, text=True,
            )
            if proc.returncode != 0:
                raise RuntimeError(
                    f"aggregation failed (exit {proc.returncode}): "
                    f"{proc.stderr.strip() or proc.stdout.strip()}"
                )
    return read_embeddings(request.out_path)
