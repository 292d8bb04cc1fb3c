"""DA-CIL Workbench - domain-adaptive class-incremental 3D detection on synthetic scenes."""
