"""Flow attention for graph neural networks on flow graphs and DAGs.

Submodules:

* ``graph``: graphs, DAGs, computation trees, multisets
* ``autodiff``: reverse-mode tensors, segment ops, GRU
* ``attention``: GAT / GATv2 / TransformerConv scoring with standard or flow normalization
* ``dag_models``: DAGNN, D-VAE and FlowDAGNN encoders with readouts
* ``flow``: flow extraction and Kirchhoff residuals
* ``expressivity``: counterexample families and discrimination reports
* ``models`` / ``training`` / ``metrics``: trainable models, optimization, evaluation
* ``data``: line-delimited datasets and synthetic generators
* ``cli``: the ``flowattn`` command
"""

from .attention import EdgeWeights, mp_layer, normalize_flow, normalize_standard, score_edges
from .dag_models import dagnn_layer, dvae_layer, encode, flowdagnn_layer, init_encoder
from .flow import Flow, extract_flow, kirchhoff_residual
from .graph import Dag, Graph, computation_tree, merge_final_nodes, reverse, topo_sort

__version__ = "0.1.0"

__all__ = [
    "Dag", "EdgeWeights", "Flow", "Graph", "computation_tree", "dagnn_layer", "dvae_layer",
    "encode", "extract_flow", "flowdagnn_layer", "init_encoder", "kirchhoff_residual",
    "merge_final_nodes", "mp_layer", "normalize_flow", "normalize_standard", "reverse",
    "score_edges", "topo_sort",
]
