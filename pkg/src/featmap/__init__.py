"""Feature-mapping domain adaptation for 3D pose regression.

A feature extractor ``f``, a real-to-synthetic feature mapper ``g`` and a pose
head ``h`` are trained jointly on clean renders of a box and on corrupted
renders standing in for real captures.
"""

__version__ = "0.1.0"
