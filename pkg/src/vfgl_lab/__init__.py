"""Split-feature federated graph learning, and attacks on it.

A small numpy laboratory: several clients each hold a vertical slice of the
node features, train local GNN encoders, and a server fuses their embeddings
through an MLP head that exposes only class probabilities.  On top of that
protocol live a feature-manipulation scheme that concentrates the local
model onto one activation path, a one-query shadow distillation, and a set
of structural evasion attacks with shared query accounting.
"""

from .graph import (Graph, GraphFormatError, FeatureSplit, load_graph,
                    save_graph, synth_sbm, split_features,
                    normalize_adjacency_matrix, normalized_adjacency)
from .models import (init_model, init_mlp, model_forward, model_backward,
                     mlp_forward, mlp_backward, save_checkpoint,
                     load_checkpoint, AdamState, init_adam, adam_step)
from .protocol import (Defense, parse_defense, TrainConfig, train_vfgl,
                       QueryService, server_query, serve_probabilities,
                       accuracy, client_only_accuracy, evaluate_attack,
                       foolsgold_weights, apply_dp, propagation_matrix)
from .manipulation import (NeuronPath, trace_neuron_path, trace_neuron_paths,
                           ManipulationPlan, build_manipulation_plan,
                           rfa_manipulate, sfa_manipulate, ShadowModel,
                           build_shadow, shadow_predict, distillation_pipeline,
                           na2_pipeline)
from .attacks import (AttackBudget, AttackOutcome, fga_attack,
                      gradargmax_attack, genetic_attack, apply_flips,
                      perturbation_ok, shadow_edge_gradient, GENERATORS,
                      register_generator)
from .metrics import (asr, aq, impv, contribution_scores,
                      pearson_significance, weight_norm_diff, detection_rate,
                      export_embeddings, ExperimentRecord, write_results_csv,
                      read_results_csv)
from .harness import (RunConfig, parse_config_file, config_from_mapping,
                      build_graph, run_experiment, compare_methods,
                      manipulation_time_sweep, gradcheck_suite)

__version__ = "0.1.0"
