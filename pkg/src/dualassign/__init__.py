"""Dense object detection with a jointly trained one-to-one and one-to-many head.

The one-to-one head is matched by Hungarian assignment and needs no NMS at
inference; the auxiliary one-to-many head adds positive samples during
training and can be dropped afterwards.
"""

__version__ = "0.1.0"
