"""Dense BEV grid queries with in-network rotated NMS, a masked-attention decoder and temporal memory."""
from .geometry import (ConvexPolygon, OrientedBoxBEV, Pose2D, box_corners, compose,
                       convex_intersection_area, inverse, rotated_iou, scale_box, transform_box)
from .model import DenseBEV, DenseBEVConfig, assemble_hybrid_queries, look_forward_twice
from .suppression import (AttentionMask, Detection, bev_nms, bev_nms_class_aware, build_attention_mask,
                          merge_mask, pair_prune_heuristic, prefilter_candidates, topk_by_confidence)
from .temporal import MemoryQueue, MotionAttributes, align_bev_grid, align_memory, memory_push, motion_encode

__version__ = "0.1.0"
