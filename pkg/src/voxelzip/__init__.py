"""Compression, refinement and rendering of sparse voxel radiance grids."""

from ._backend import NAME as BACKEND
from .cameras import heldout_cameras, probe_cameras
from .compress import (CompressedModel, CompressionConfig, ImportanceMap, ImportantVoxelSet,
                       compress, compute_importance, importance_concentration, restore,
                       select_important)
from .container import (read_container, load_container, save_container, storage_report,
                        write_container, load_raw_grid, save_raw_grid)
from .errors import VoxelZipError
from .grid import (GridDims, OccupancyMask, Precision, VoxelGrid, coarsen_mask, mask_to_pointers,
                   pointers_to_mask, sparsify, trilinear_resize, trilinear_sample)
from .ncb import NcbNetwork, TrainConfig, ncb_apply, ncb_refine_grid, train_ncb
from .render import Camera, MarchConfig, Ray, eval_sh, psnr, render_image, render_ray, render_reference
from .synth import SceneKind, SceneSpec, generate_scene, oracle_importance, run_ablation

__version__ = "0.1.0"
