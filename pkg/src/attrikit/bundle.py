"""Encoder + decoder pair sharing one parameter namespace and checkpoint."""

from __future__ import annotations

import numpy as np

from . import nn, tensorcore as tc
from .encoder import AttrEncoder, EncoderConfig
from .generator import Decoder, DecoderConfig

__all__ = ["ModelBundle", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1


class ModelBundle:
    """The trainable model: attribute encoder, image decoder, null conditions."""

    def __init__(self, enc_config=None, dec_config=None, seed=0, dtype=np.float32):
        self.enc_config = enc_config or EncoderConfig()
        self.dec_config = dec_config or DecoderConfig()
        if self.enc_config.dim != self.dec_config.dim:
            raise tc.ShapeMismatch("encoder and decoder widths must match")
        if self.enc_config.queries != self.dec_config.attr_tokens:
            raise tc.ShapeMismatch("decoder must expect exactly the encoder's query count")
        self.seed = int(seed)
        self.store = nn.ParamStore(seed, dtype)
        self.encoder = AttrEncoder(self.enc_config, store=self.store, prefix="enc")
        self.decoder = Decoder(self.dec_config, store=self.store, prefix="dec")

    # -- parameter access ---------------------------------------------------

    def params(self):
        return self.store.tensors()

    def param_names(self):
        return self.store.names()

    def named_params(self):
        return self.store.named()

    def zero_grads(self):
        for p in self.params():
            p.grad = None

    def grads(self):
        return [p.grad for p in self.params()]

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra=None):
        """Write all parameters (plus optional float32 metadata arrays)."""
        arrays = {name: t.data for name, t in self.store.named().items()}
        arrays["meta.schema_version"] = np.array([SCHEMA_VERSION], dtype=np.float32)
        if extra:
            for k, v in extra.items():
                arrays[f"meta.{k}"] = np.asarray(v, dtype=np.float32)
        tc.save_tensors(path, arrays)

    def load(self, path):
        """Restore parameters in place; returns the metadata arrays.

        Raises ShapeMismatch when the file does not carry exactly this
        architecture's tensors.
        """
        arrays = tc.load_tensors(path)
        meta = {k[len("meta."):]: v for k, v in arrays.items() if k.startswith("meta.")}
        for name, t in self.store.named().items():
            if name not in arrays:
                raise tc.ShapeMismatch(f"checkpoint missing tensor {name}")
            if arrays[name].shape != t.data.shape:
                raise tc.ShapeMismatch(
                    f"{name}: checkpoint shape {arrays[name].shape} != model {t.data.shape}")
            t.data = arrays[name].astype(t.data.dtype)
        return meta

    # -- inference conveniences ------------------------------------------------

    def embed(self, image, attrs):
        return self.encoder.encode(image, attrs)

    def pooled_batch(self, images, attr_lists, batch=256):
        """Pooled embeddings for many (image, attribute-list) rows, float64."""
        out = []
        with tc.no_grad():
            for lo in range(0, len(images), batch):
                toks = self.encoder.encode_batch(
                    np.asarray(images[lo: lo + batch]), attr_lists[lo: lo + batch])
                out.append(toks.data.mean(axis=1, dtype=np.float64))
        return np.concatenate(out, axis=0)
