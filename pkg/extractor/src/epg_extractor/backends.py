"""Model wrappers: CLIP for semantic rows, DinoV2 for localization features.

Both load lazily on first use and run on CPU unless EPG_EXTRACTOR_DEVICE
says otherwise. The DinoV2 wrapper taps the value projection of one
attention block (layer 31 by default) via a forward hook and returns
per-patch features with the class and register tokens stripped; this
"value facet" is the usual choice for place-recognition features.
"""

import os

import numpy as np

DEFAULT_CLIP = "laion/CLIP-ViT-L-14-DataComp.XL-s13B-b90K"
DEFAULT_DINO = "facebook/dinov2-with-registers-giant"
VALUE_LAYER = 31


class ModelUnavailableError(RuntimeError):
    pass


def _device():
    return os.environ.get("EPG_EXTRACTOR_DEVICE", "cpu")


def _load(fn, name):
    try:
        return fn()
    except Exception as exc:  # transformers raises OSError/EnvironmentError variants
        raise ModelUnavailableError(
            f"model weights for {name} unavailable: {exc}. Pre-download them into the "
            "HuggingFace cache (HF_HOME) on a machine with network access."
        ) from exc


class ClipBackend:
    """OpenCLIP ViT-L/14 image/text embeddings, unit-normalized float16."""

    def __init__(self, model_id=None):
        self.model_id = model_id or os.environ.get("EPG_CLIP_MODEL", DEFAULT_CLIP)
        self._model = None
        self._processor = None

    def _ensure(self):
        if self._model is not None:
            return
        import torch
        from transformers import CLIPModel, CLIPProcessor

        def load():
            model = CLIPModel.from_pretrained(self.model_id)
            processor = CLIPProcessor.from_pretrained(self.model_id)
            return model, processor

        self._model, self._processor = _load(load, self.model_id)
        self._model.eval().to(_device())
        self._torch = torch

    def embed_images(self, paths, batch_size=8):
        self._ensure()
        from PIL import Image

        rows = []
        with self._torch.no_grad():
            for start in range(0, len(paths), batch_size):
                images = [Image.open(p).convert("RGB") for p in paths[start : start + batch_size]]
                inputs = self._processor(images=images, return_tensors="pt").to(_device())
                feats = self._model.get_image_features(**inputs)
                feats = feats / feats.norm(dim=-1, keepdim=True)
                rows.append(feats.cpu().numpy())
        return np.vstack(rows).astype(np.float16)

    def embed_texts(self, texts, batch_size=32):
        self._ensure()
        rows = []
        with self._torch.no_grad():
            for start in range(0, len(texts), batch_size):
                inputs = self._processor(
                    text=list(texts[start : start + batch_size]),
                    return_tensors="pt",
                    padding=True,
                    truncation=True,
                ).to(_device())
                feats = self._model.get_text_features(**inputs)
                feats = feats / feats.norm(dim=-1, keepdim=True)
                rows.append(feats.cpu().numpy())
        return np.vstack(rows).astype(np.float16)


def install_value_hook(model, layer, callback):
    """Tap the value projection of one attention block.

    ``callback`` receives the raw (batch, tokens, dim) value tensor on every
    forward pass. Token 0 is the class token, followed by
    ``config.num_register_tokens`` registers, then the image patches.
    Returns the number of leading non-patch tokens.
    """
    value_proj = model.encoder.layer[layer].attention.attention.value

    def hook(_module, _inputs, output):
        callback(output)

    value_proj.register_forward_hook(hook)
    return 1 + getattr(model.config, "num_register_tokens", 0)


class DinoBackend:
    """DinoV2 ViT-g/14 (with registers): per-patch value-facet features.

    The hook captures the output of
    ``encoder.layer[VALUE_LAYER].attention.attention.value`` and drops the
    class token plus register tokens, leaving one row per image patch.
    """

    def __init__(self, model_id=None, layer=VALUE_LAYER):
        self.model_id = model_id or os.environ.get("EPG_DINO_MODEL", DEFAULT_DINO)
        self.layer = layer
        self._model = None
        self._processor = None
        self._captured = None

    def _ensure(self):
        if self._model is not None:
            return
        import torch
        from transformers import AutoImageProcessor, AutoModel

        def load():
            model = AutoModel.from_pretrained(self.model_id)
            processor = AutoImageProcessor.from_pretrained(self.model_id)
            return model, processor

        self._model, self._processor = _load(load, self.model_id)
        self._model.eval().to(_device())
        self._torch = torch

        def capture(tensor):
            self._captured = tensor

        self._skip_tokens = install_value_hook(self._model, self.layer, capture)

    def patch_features(self, path):
        """(n_patches, feature_dim) float32 value features of one image."""
        self._ensure()
        from PIL import Image

        image = Image.open(path).convert("RGB")
        inputs = self._processor(images=image, return_tensors="pt").to(_device())
        with self._torch.no_grad():
            self._captured = None
            self._model(**inputs)
        if self._captured is None:
            raise RuntimeError(f"value hook at layer {self.layer} never fired")
        feats = self._captured[0, self._skip_tokens :, :]
        return feats.cpu().numpy().astype(np.float32)
