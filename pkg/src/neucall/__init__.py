"""Indirect-call target resolution for stripped binaries.

Pipeline: load or import a program (ingest) -> recover blocks, flow edges,
and functions (cfg) -> scan cross-references and partition data (symbolize)
-> assemble the augmented heterogeneous CFG (acfg) -> node features and
positional encodings (features) -> relational graph convolution + link
predictor (model) -> sampling/splitting (dataset) and metrics (evaluate).
"""

from .acfg import SETTINGS, Acfg, FeatureConfig, build_acfg, homogenize
from .cfg import BasicBlock, FlowEdge, FunctionExtent, build_cfg, recover_functions, split_basic_blocks
from .dataset import LabelSet, PairSample, load_labels, sample_balanced, split_projects
from .evaluate import Metrics, compute_aict, compute_auroc, compute_metrics, emit_pr_curve
from .features import EmbeddingProvider, TokenSeq, Vocabulary, laplacian_pe, tokenize_block
from .ingest import Instruction, ProgramIR, Section, export_program_ir, import_program_ir, load_elf
from .model import (Hyperparams, ModelParams, backward, init_params, load_checkpoint,
                    pair_loss, predict_pair, rgcn_forward, save_checkpoint, train_epoch)
from .symbolize import DataNode, XRef, classify_xref, partition_data, scan_xrefs
from .synthetic import generate_synthetic_corpus

__version__ = "0.1.0"
