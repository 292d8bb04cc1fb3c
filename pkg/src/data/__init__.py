"""Scenes, scene files, the ground-truth database and copy-paste augmentation."""
