"""Embedding providers: resolve a frame id to (semantic, localization) vectors.

A provider is any callable ``provider(frame_id) -> (semantic, localization)``.
The two shipped implementations look rows up in embedding files, or shell
out to the extractor executable for raw images.
"""

import os
import subprocess
import tempfile

import numpy as np

from . import io as epgio


class ArrayProvider:
    """Dict-backed provider for synthetic data and tests."""

    def __init__(self, semantic, localization):
        self.semantic = semantic
        self.localization = localization
        self.calls = 0

    def __call__(self, frame_id):
        self.calls += 1
        return self.semantic[frame_id], self.localization[frame_id]


class FileProvider:
    """Row lookup across a semantic and a localization embedding file."""

    def __init__(self, semantic_path, localization_path):
        ids_s, mat_s = epgio.load_embeddings(semantic_path)
        ids_l, mat_l = epgio.load_embeddings(localization_path)
        self.semantic = {fid: mat_s[i] for i, fid in enumerate(ids_s)}
        self.localization = {fid: mat_l[i] for i, fid in enumerate(ids_l)}
        self.calls = 0

    def __call__(self, frame_id):
        self.calls += 1
        try:
            return self.semantic[frame_id], self.localization[frame_id]
        except KeyError:
            raise KeyError(f"frame id '{frame_id}' missing from embedding files") from None


def run_extractor(executable, mode, inputs, out_path, vocab=None, pca=None):
    """Invoke the extractor subprocess and return the written embedding file."""
    cmd = [executable, "--mode", mode, "--out", out_path]
    for item in inputs:
        cmd += ["--input", item]
    if vocab:
        cmd += ["--vocab", vocab]
    if pca:
        cmd += ["--pca", pca]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"extractor failed (exit {proc.returncode}): {proc.stderr.strip() or proc.stdout.strip()}"
        )
    return epgio.load_embeddings(out_path)


def extract_single(executable, mode, item, vocab=None, pca=None):
    """One-shot extraction of a single text or image, returning the row."""
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "row.emb")
        _, matrix = run_extractor(executable, mode, [item], out, vocab=vocab, pca=pca)
    return np.asarray(matrix[0], dtype=np.float32)


class ExtractorProvider:
    """Per-frame extraction through the extractor executable.

    frame_id is treated as an image path; clip-image fills the semantic
    vector and loc-descriptor (through the given artifacts) the
    localization vector. Intended for small on-demand jobs; batch builds
    should precompute embedding files instead.
    """

    def __init__(self, executable=None, vocab=None, pca=None):
        self.executable = executable or os.environ.get("EPG_EXTRACTOR")
        if not self.executable:
            raise ValueError("no extractor executable given and EPG_EXTRACTOR is unset")
        self.vocab = vocab
        self.pca = pca
        self.calls = 0

    def __call__(self, frame_id):
        self.calls += 1
        semantic = extract_single(self.executable, "clip-image", frame_id)
        localization = extract_single(
            self.executable, "loc-descriptor", frame_id, vocab=self.vocab, pca=self.pca
        )
        return semantic, localization
