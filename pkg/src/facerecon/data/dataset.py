"""In-memory image batches keyed by identity."""
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ResolutionMismatchError
from .manifest import ImageManifest
from .preprocess import FaceImage, align_and_crop, center_crop_resize, load_image, normalize_pixels


@dataclass
class FaceDataset:
    """Images as one float tensor ``(n, 3, s, s)`` in [-1, 1] plus parallel id lists."""

    pixels: torch.Tensor
    subject_ids: list
    sample_ids: list
    partitions: list = None

    def __post_init__(self):
        n = len(self.pixels)
        if self.partitions is None:
            self.partitions = [""] * n
        if not (len(self.subject_ids) == len(self.sample_ids) == len(self.partitions) == n):
            raise ValueError("pixels and id lists must have equal length")

    def __len__(self):
        return len(self.pixels)

    @property
    def image_size(self):
        return int(self.pixels.shape[-1])

    @property
    def subjects(self):
        return sorted(set(self.subject_ids))

    def image(self, i):
        return FaceImage(self.pixels[i].numpy(), self.subject_ids[i], self.sample_ids[i])

    def subset(self, indices):
        idx = [int(i) for i in indices]
        return FaceDataset(self.pixels[idx], [self.subject_ids[i] for i in idx],
                           [self.sample_ids[i] for i in idx], [self.partitions[i] for i in idx])

    def where(self, predicate):
        return self.subset([i for i in range(len(self)) if predicate(i)])

    def by_subjects(self, subjects):
        keep = set(subjects)
        return self.where(lambda i: self.subject_ids[i] in keep)

    def partition(self, name):
        return self.where(lambda i: self.partitions[i] == name)

    def check_size(self, size):
        if self.image_size != size:
            raise ResolutionMismatchError(f"dataset images are {self.image_size}px, expected {size}px")

    @classmethod
    def from_images(cls, images, partitions=None):
        pixels = torch.from_numpy(np.stack([im.pixels for im in images]).astype(np.float32))
        return cls(pixels, [im.subject_id for im in images], [im.sample_id for im in images], partitions)

    @classmethod
    def from_manifest(cls, manifest: ImageManifest, size):
        """Load every entry; entries with landmarks are aligned, others centre-cropped."""
        images = [load_entry(manifest, e, size) for e in manifest]
        return cls.from_images(images, [e.partition for e in manifest])


def load_entry(manifest, entry, size):
    raw = load_image(manifest.resolve(entry))
    if entry.landmarks is not None:
        return align_and_crop(raw, entry.landmarks, size, entry.subject_id, entry.sample_id)
    crop = center_crop_resize(raw, size)
    pixels = np.transpose(normalize_pixels(crop), (2, 0, 1)).copy()
    return FaceImage(pixels, entry.subject_id, entry.sample_id)


def as_dataset(source, size=None):
    """Accept a FaceDataset or an ImageManifest (loaded at ``size``)."""
    if isinstance(source, FaceDataset):
        if size is not None:
            source.check_size(size)
        return source
    if isinstance(source, ImageManifest):
        if size is None:
            raise ValueError("image size is required to load a manifest")
        return FaceDataset.from_manifest(source, size)
    raise TypeError(f"expected FaceDataset or ImageManifest, got {type(source).__name__}")
