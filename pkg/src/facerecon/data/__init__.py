from .manifest import ImageManifest, ManifestEntry, load_manifest, parse_manifest, write_manifest
from .preprocess import (FaceImage, align_and_crop, canonical_landmarks, denormalize_pixels,
                         estimate_similarity, load_image, normalize_pixels, save_image)
from .dataset import FaceDataset, as_dataset
from .synthetic import synthetic_faces, write_synthetic_dataset

__all__ = [
    "ImageManifest", "ManifestEntry", "load_manifest", "parse_manifest", "write_manifest",
    "FaceImage", "align_and_crop", "canonical_landmarks", "denormalize_pixels",
    "estimate_similarity", "load_image", "normalize_pixels", "save_image",
    "FaceDataset", "as_dataset", "synthetic_faces", "write_synthetic_dataset",
]
