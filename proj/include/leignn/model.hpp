#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "leignn/geometry.hpp"
#include "leignn/rng.hpp"
#include "leignn/structure.hpp"
#include "leignn/tensor.hpp"
#include "leignn/tensor_ops.hpp"

namespace leignn {

struct Hyperparams {
  int feature_width = 128;  // per-node scalar count, equal to the vector count
  int num_layers = 4;
  double cutoff = 6.0;  // Angstrom
  int max_neighbors = 30;
  int num_rbf = 20;
  bool use_global = true;   // global distribute/aggregate phases
  bool use_nmu = true;      // gated message update; off selects the PaiNN-style update
  bool use_cutoff_envelope = true;
  int element_vocab = 100;  // highest accepted atomic number

  void validate() const {
    detail::check(feature_width >= 1, "feature width must be >= 1");
    detail::check(num_layers >= 0, "layer count must be >= 0");
    detail::check(cutoff > 0, "cutoff must be positive");
    detail::check(max_neighbors >= 1, "max neighbor count must be >= 1");
    detail::check(num_rbf >= 1, "radial basis count must be >= 1");
    detail::check(element_vocab >= 1, "element vocabulary must be >= 1");
  }

  bool operator==(const Hyperparams&) const = default;
};

/// Named architecture variants used in ablations.
enum class ModelVariant { kVanilla, kVanillaNmu, kFull };

inline void apply_variant(Hyperparams& h, ModelVariant v) {
  switch (v) {
    case ModelVariant::kVanilla:
      h.use_global = false;
      h.use_nmu = false;
      break;
    case ModelVariant::kVanillaNmu:
      h.use_global = false;
      h.use_nmu = true;
      break;
    case ModelVariant::kFull:
      h.use_global = true;
      h.use_nmu = true;
      break;
  }
}

/// Gaussian radial basis expansion of a distance, with centers evenly spaced
/// on [0, cutoff] and width set by the center spacing. A cosine envelope
/// 0.5*(cos(pi*r/cutoff) + 1) smoothly switches every filter off at the
/// cutoff so predictions stay continuous as neighbors enter or leave.
inline std::vector<double> rbf_expand(double r, double cutoff, int count,
                                      bool envelope = true) {
  detail::check(r > 0 && r <= cutoff, "rbf_expand: distance outside (0, cutoff]");
  detail::check(count >= 1, "rbf_expand: count must be >= 1");
  const double spacing = count > 1 ? cutoff / (count - 1) : cutoff;
  const double gamma = 1.0 / (2.0 * spacing * spacing);
  const double env = envelope ? 0.5 * (std::cos(M_PI * r / cutoff) + 1.0) : 1.0;
  std::vector<double> values(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const double mu = spacing * k;
    values[static_cast<std::size_t>(k)] = std::exp(-gamma * (r - mu) * (r - mu)) * env;
  }
  return values;
}

/// Linear layer with bias, stored (fan_in x fan_out) and applied as x * W + b.
template <typename Real>
struct Dense {
  Tensor<Real> weight;
  Tensor<Real> bias;  // 1 x fan_out

  Tensor<Real> apply(Tape<Real>* tape, const Tensor<Real>& x) const {
    return ops::add_rowvec(tape, ops::matmul(tape, x, weight), bias);
  }
};

/// Two-layer perceptron with SiLU hidden activation.
template <typename Real>
struct Mlp {
  Dense<Real> hidden;
  Dense<Real> out;

  Tensor<Real> apply(Tape<Real>* tape, const Tensor<Real>& x) const {
    return out.apply(tape, ops::silu(tape, hidden.apply(tape, x)));
  }
};

/// Trainable tensors of one interaction layer. Weights act on the feature
/// axis by right multiplication, so each stores the transpose of the
/// conventional left-acting matrix.
template <typename Real>
struct LayerParams {
  // Message passing: per-edge scalar messages and the two vector channels
  // (neighbor-vector gating and radial direction), each with its own learned
  // combination of the radial basis values.
  Tensor<Real> msg_scalar_weight;   // F x F
  Tensor<Real> msg_scalar_rbf;      // K x F
  Tensor<Real> msg_vector_weight;   // F x F
  Tensor<Real> msg_vector_rbf;      // K x F
  Tensor<Real> msg_direction_weight;  // F x F
  Tensor<Real> msg_direction_rbf;     // K x F

  // Gated message update (the "NMU" scheme).
  Tensor<Real> upd_scalar_weight;  // 2F x F
  Tensor<Real> upd_gate_weight;    // 2F x F
  Tensor<Real> upd_vector_weight;  // 2F x F
  Tensor<Real> upd_vector_mix;     // F x F, mixes the message vectors
  Tensor<Real> upd_norm_mix;       // F x F, mixes vectors before the norm gate

  // PaiNN-style update used when the NMU scheme is toggled off.
  Mlp<Real> upd_mlp;  // 2F -> F -> 3F

  // Global communication channel.
  Mlp<Real> dist_mlp;                // 2F -> F -> F
  Tensor<Real> dist_vector_weight;   // F x F
  Mlp<Real> agg_mlp;                 // 2F -> F -> F
  Tensor<Real> agg_vector_weight;    // F x F
};

/// Dataset-level energy normalization: predictions are produced as
/// energy = scale * (network output) + sum_i species_ref[z_i].
struct EnergyNorm {
  std::vector<double> species_ref;  // indexed by atomic number
  double scale = 1.0;

  double ref_for(int z) const {
    const auto idx = static_cast<std::size_t>(z);
    return idx < species_ref.size() ? species_ref[idx] : 0.0;
  }
};

template <typename Real>
struct ModelParams {
  Hyperparams hyper;
  Tensor<Real> embedding;           // (vocab+1) x F
  Tensor<Real> global_scalar_init;  // 1 x F
  std::vector<LayerParams<Real>> layers;
  Mlp<Real> energy_mlp;       // F -> F -> 1
  Tensor<Real> species_bias;  // (vocab+1) x 1
  Tensor<Real> force_weight;  // F x 1
  EnergyNorm norm;

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each_param(Fn&& fn) const {
    visit(*this, fn);
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for_each_param([&](const std::string&, const Tensor<Real>& t) { total += t.size(); });
    return total;
  }

  void zero_grad() {
    for_each_param([](const std::string&, Tensor<Real>& t) { t.zero_grad(); });
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    const auto& h = self.hyper;
    fn("embedding", self.embedding);
    if (h.use_global) fn("global_init", self.global_scalar_init);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& lp = self.layers[l];
      const std::string prefix = "layers." + std::to_string(l) + ".";
      fn(prefix + "msg_scalar_weight", lp.msg_scalar_weight);
      fn(prefix + "msg_scalar_rbf", lp.msg_scalar_rbf);
      fn(prefix + "msg_vector_weight", lp.msg_vector_weight);
      fn(prefix + "msg_vector_rbf", lp.msg_vector_rbf);
      fn(prefix + "msg_direction_weight", lp.msg_direction_weight);
      fn(prefix + "msg_direction_rbf", lp.msg_direction_rbf);
      fn(prefix + "upd_vector_mix", lp.upd_vector_mix);
      fn(prefix + "upd_norm_mix", lp.upd_norm_mix);
      if (h.use_nmu) {
        fn(prefix + "upd_scalar_weight", lp.upd_scalar_weight);
        fn(prefix + "upd_gate_weight", lp.upd_gate_weight);
        fn(prefix + "upd_vector_weight", lp.upd_vector_weight);
      } else {
        fn(prefix + "upd_mlp.hidden.weight", lp.upd_mlp.hidden.weight);
        fn(prefix + "upd_mlp.hidden.bias", lp.upd_mlp.hidden.bias);
        fn(prefix + "upd_mlp.out.weight", lp.upd_mlp.out.weight);
        fn(prefix + "upd_mlp.out.bias", lp.upd_mlp.out.bias);
      }
      if (h.use_global) {
        fn(prefix + "dist_mlp.hidden.weight", lp.dist_mlp.hidden.weight);
        fn(prefix + "dist_mlp.hidden.bias", lp.dist_mlp.hidden.bias);
        fn(prefix + "dist_mlp.out.weight", lp.dist_mlp.out.weight);
        fn(prefix + "dist_mlp.out.bias", lp.dist_mlp.out.bias);
        fn(prefix + "dist_vector_weight", lp.dist_vector_weight);
        fn(prefix + "agg_mlp.hidden.weight", lp.agg_mlp.hidden.weight);
        fn(prefix + "agg_mlp.hidden.bias", lp.agg_mlp.hidden.bias);
        fn(prefix + "agg_mlp.out.weight", lp.agg_mlp.out.weight);
        fn(prefix + "agg_mlp.out.bias", lp.agg_mlp.out.bias);
        fn(prefix + "agg_vector_weight", lp.agg_vector_weight);
      }
    }
    fn("energy_mlp.hidden.weight", self.energy_mlp.hidden.weight);
    fn("energy_mlp.hidden.bias", self.energy_mlp.hidden.bias);
    fn("energy_mlp.out.weight", self.energy_mlp.out.weight);
    fn("energy_mlp.out.bias", self.energy_mlp.out.bias);
    fn("species_bias", self.species_bias);
    fn("force_weight", self.force_weight);
  }
};

namespace model_detail {

template <typename Real>
Tensor<Real> glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<Real> data(fan_in * fan_out);
  for (Real& v : data) v = static_cast<Real>(rng.uniform(-bound, bound));
  return Tensor<Real>({fan_in, fan_out}, std::move(data), /*requires_grad=*/true);
}

template <typename Real>
Dense<Real> make_dense(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  Dense<Real> d;
  d.weight = glorot<Real>(rng, fan_in, fan_out);
  d.bias = Tensor<Real>({1, fan_out}, std::vector<Real>(fan_out, Real(0)), true);
  return d;
}

template <typename Real>
Mlp<Real> make_mlp(Rng& rng, std::size_t in, std::size_t hidden, std::size_t out) {
  return Mlp<Real>{make_dense<Real>(rng, in, hidden), make_dense<Real>(rng, hidden, out)};
}

}  // namespace model_detail

template <typename Real>
ModelParams<Real> init_params(const Hyperparams& hyper, std::uint64_t seed) {
  hyper.validate();
  using model_detail::glorot;
  using model_detail::make_mlp;
  const auto F = static_cast<std::size_t>(hyper.feature_width);
  const auto K = static_cast<std::size_t>(hyper.num_rbf);
  const auto vocab = static_cast<std::size_t>(hyper.element_vocab);
  Rng rng = Rng::split(seed, "model-init");

  ModelParams<Real> p;
  p.hyper = hyper;
  {
    std::vector<Real> table((vocab + 1) * F);
    const double scale = 1.0 / std::sqrt(static_cast<double>(F));
    for (Real& v : table) v = static_cast<Real>(rng.uniform(-1.0, 1.0) * scale);
    p.embedding = Tensor<Real>({vocab + 1, F}, std::move(table), true);
  }
  p.global_scalar_init = Tensor<Real>({1, F}, std::vector<Real>(F, Real(0)), true);
  for (int t = 0; t < hyper.num_layers; ++t) {
    LayerParams<Real> lp;
    lp.msg_scalar_weight = glorot<Real>(rng, F, F);
    lp.msg_scalar_rbf = glorot<Real>(rng, K, F);
    lp.msg_vector_weight = glorot<Real>(rng, F, F);
    lp.msg_vector_rbf = glorot<Real>(rng, K, F);
    lp.msg_direction_weight = glorot<Real>(rng, F, F);
    lp.msg_direction_rbf = glorot<Real>(rng, K, F);
    lp.upd_vector_mix = glorot<Real>(rng, F, F);
    lp.upd_norm_mix = glorot<Real>(rng, F, F);
    if (hyper.use_nmu) {
      lp.upd_scalar_weight = glorot<Real>(rng, 2 * F, F);
      lp.upd_gate_weight = glorot<Real>(rng, 2 * F, F);
      lp.upd_vector_weight = glorot<Real>(rng, 2 * F, F);
    } else {
      lp.upd_mlp = make_mlp<Real>(rng, 2 * F, F, 3 * F);
    }
    if (hyper.use_global) {
      lp.dist_mlp = make_mlp<Real>(rng, 2 * F, F, F);
      lp.dist_vector_weight = glorot<Real>(rng, F, F);
      lp.agg_mlp = make_mlp<Real>(rng, 2 * F, F, F);
      lp.agg_vector_weight = glorot<Real>(rng, F, F);
    }
    p.layers.push_back(std::move(lp));
  }
  p.energy_mlp = make_mlp<Real>(rng, F, F, 1);
  p.species_bias = Tensor<Real>({vocab + 1, 1}, std::vector<Real>(vocab + 1, Real(0)), true);
  p.force_weight = glorot<Real>(rng, F, 1);
  return p;
}

/// Constant (non-trainable) per-batch graph data: merged edge lists, radial
/// basis values, unit direction components and graph membership.
template <typename Real>
struct BatchGraph {
  std::vector<int> z;           // per node
  std::vector<int> node_graph;  // node -> graph index
  std::vector<int> edge_src;
  std::vector<int> edge_dst;
  Tensor<Real> edge_rbf;                     // E x K
  std::array<std::vector<Real>, 3> edge_unit;  // per-edge direction components
  int num_nodes = 0;
  int num_edges = 0;
  int num_graphs = 0;
  std::vector<int> graph_offsets;  // size num_graphs + 1
};

namespace model_detail {

/// Append one structure with an already-built neighbor graph to a batch.
template <typename Real>
void append_graph(BatchGraph<Real>& bg, const Structure& s, const Graph& graph,
                  const Hyperparams& hyper, std::vector<double>& rbf_flat) {
  const int gi = static_cast<int>(bg.graph_offsets.size()) - 1;
  const int offset = bg.num_nodes;
  for (int z : s.atomic_numbers) {
    detail::check(z >= 1 && z <= hyper.element_vocab,
                  "atomic number " + std::to_string(z) + " outside the vocabulary");
    bg.z.push_back(z);
    bg.node_graph.push_back(gi);
  }
  for (std::size_t k = 0; k < graph.num_edges(); ++k) {
    bg.edge_src.push_back(graph.edge_src[k] + offset);
    bg.edge_dst.push_back(graph.edge_dst[k] + offset);
    const double len = graph.edge_len[k];
    const Vec3 unit = graph.edge_vec[k] / len;
    bg.edge_unit[0].push_back(static_cast<Real>(unit.x));
    bg.edge_unit[1].push_back(static_cast<Real>(unit.y));
    bg.edge_unit[2].push_back(static_cast<Real>(unit.z));
    const std::vector<double> basis =
        rbf_expand(len, hyper.cutoff, hyper.num_rbf, hyper.use_cutoff_envelope);
    rbf_flat.insert(rbf_flat.end(), basis.begin(), basis.end());
  }
  bg.num_nodes += static_cast<int>(s.size());
  bg.graph_offsets.push_back(bg.num_nodes);
}

template <typename Real>
void finalize_batch(BatchGraph<Real>& bg, const Hyperparams& hyper,
                    std::vector<double>& rbf_flat) {
  bg.num_graphs = static_cast<int>(bg.graph_offsets.size()) - 1;
  bg.num_edges = static_cast<int>(bg.edge_src.size());
  std::vector<Real> rbf_cast(rbf_flat.size());
  for (std::size_t i = 0; i < rbf_flat.size(); ++i)
    rbf_cast[i] = static_cast<Real>(rbf_flat[i]);
  bg.edge_rbf = Tensor<Real>({static_cast<std::size_t>(bg.num_edges),
                              static_cast<std::size_t>(hyper.num_rbf)},
                             std::move(rbf_cast));
}

}  // namespace model_detail

template <typename Real>
BatchGraph<Real> build_batch_graph(std::span<const Structure> structures,
                                   const Hyperparams& hyper) {
  detail::check(!structures.empty(), "batch must contain at least one structure");
  BatchGraph<Real> bg;
  bg.graph_offsets.push_back(0);
  std::vector<double> rbf_flat;
  for (const Structure& s : structures) {
    const Graph graph = build_neighbor_list(s, hyper.cutoff, hyper.max_neighbors);
    model_detail::append_graph(bg, s, graph, hyper, rbf_flat);
  }
  model_detail::finalize_batch(bg, hyper, rbf_flat);
  return bg;
}

/// Single-structure batch over a caller-supplied neighbor graph (used by the
/// MD force provider when it reuses a skin-padded list).
template <typename Real>
BatchGraph<Real> batch_graph_from(const Structure& s, const Graph& graph,
                                  const Hyperparams& hyper) {
  BatchGraph<Real> bg;
  bg.graph_offsets.push_back(0);
  std::vector<double> rbf_flat;
  model_detail::append_graph(bg, s, graph, hyper, rbf_flat);
  model_detail::finalize_batch(bg, hyper, rbf_flat);
  return bg;
}

/// Per-node state: rotation-invariant scalars (M x F) and equivariant vectors
/// stored as three M x F component planes (plane c holds component c of every
/// feature vector).
template <typename Real>
struct NodeState {
  Tensor<Real> scalars;
  std::array<Tensor<Real>, 3> vectors;
};

/// Per-graph global state with the same scalar/vector split (rows = graphs).
template <typename Real>
struct GlobalState {
  Tensor<Real> scalar;
  std::array<Tensor<Real>, 3> vector;
};

/// Aggregated per-node messages produced by one message-passing sweep.
template <typename Real>
struct MessageBuffer {
  Tensor<Real> scalars;
  std::array<Tensor<Real>, 3> vectors;
};

/// Initial node state: scalars from the species embedding, vectors zero.
template <typename Real>
NodeState<Real> embed(Tape<Real>* tape, const ModelParams<Real>& params,
                      const BatchGraph<Real>& bg) {
  NodeState<Real> state;
  state.scalars = ops::gather_rows(tape, params.embedding, bg.z);
  const auto M = static_cast<std::size_t>(bg.num_nodes);
  const auto F = static_cast<std::size_t>(params.hyper.feature_width);
  for (auto& plane : state.vectors) plane = Tensor<Real>::zeros(M, F);
  return state;
}

template <typename Real>
GlobalState<Real> initial_global_state(Tape<Real>* tape, const ModelParams<Real>& params,
                                       const BatchGraph<Real>& bg) {
  GlobalState<Real> gs;
  gs.scalar = ops::repeat_row(tape, params.global_scalar_init,
                              static_cast<std::size_t>(bg.num_graphs));
  const auto B = static_cast<std::size_t>(bg.num_graphs);
  const auto F = static_cast<std::size_t>(params.hyper.feature_width);
  for (auto& plane : gs.vector) plane = Tensor<Real>::zeros(B, F);
  return gs;
}

/// Gather messages from neighbors: per-edge gated contributions summed into
/// each destination node. The scalar channel filters neighbor scalars by
/// distance; the vector channel propagates neighbor vectors and adds a term
/// along the edge direction whose per-feature magnitude acts like a force.
template <typename Real>
MessageBuffer<Real> local_message_pass(Tape<Real>* tape, const NodeState<Real>& state,
                                       const BatchGraph<Real>& bg,
                                       const LayerParams<Real>& lp) {
  detail::check(static_cast<int>(state.scalars.rows()) == bg.num_nodes,
                "node state does not match graph node count");
  const auto M = static_cast<std::size_t>(bg.num_nodes);
  MessageBuffer<Real> buf;

  Tensor<Real> src_scalars = ops::gather_rows(tape, state.scalars, bg.edge_src);
  Tensor<Real> lam_scalar = ops::matmul(tape, bg.edge_rbf, lp.msg_scalar_rbf);
  Tensor<Real> edge_scalar =
      ops::hadamard(tape, ops::matmul(tape, src_scalars, lp.msg_scalar_weight), lam_scalar);
  buf.scalars = ops::segment_sum(tape, edge_scalar, bg.edge_dst, M);

  Tensor<Real> gate_vector =
      ops::hadamard(tape, ops::matmul(tape, src_scalars, lp.msg_vector_weight),
                    ops::matmul(tape, bg.edge_rbf, lp.msg_vector_rbf));
  Tensor<Real> gate_direction =
      ops::hadamard(tape, ops::matmul(tape, src_scalars, lp.msg_direction_weight),
                    ops::matmul(tape, bg.edge_rbf, lp.msg_direction_rbf));
  for (int c = 0; c < 3; ++c) {
    Tensor<Real> src_vec = ops::gather_rows(tape, state.vectors[static_cast<std::size_t>(c)],
                                            bg.edge_src);
    Tensor<Real> along = ops::row_scale(tape, gate_direction,
                                        bg.edge_unit[static_cast<std::size_t>(c)]);
    Tensor<Real> edge_vec = ops::add(tape, ops::hadamard(tape, gate_vector, src_vec), along);
    buf.vectors[static_cast<std::size_t>(c)] =
        ops::segment_sum(tape, edge_vec, bg.edge_dst, M);
  }
  return buf;
}

/// Combine the F scalars and F vectors inside each node's message buffer into
/// the next node state. The gated form replaces the state outright; the
/// PaiNN-style alternative (use_nmu = false) applies a gated residual update.
template <typename Real>
NodeState<Real> local_message_update(Tape<Real>* tape, const MessageBuffer<Real>& buf,
                                     const NodeState<Real>& state, const LayerParams<Real>& lp,
                                     bool use_nmu) {
  std::array<Tensor<Real>, 3> norm_mixed;
  for (int c = 0; c < 3; ++c) {
    norm_mixed[static_cast<std::size_t>(c)] =
        ops::matmul(tape, buf.vectors[static_cast<std::size_t>(c)], lp.upd_norm_mix);
  }
  Tensor<Real> vec_norm = ops::spatial_norm(tape, norm_mixed[0], norm_mixed[1], norm_mixed[2]);
  Tensor<Real> joint = ops::concat_cols(tape, buf.scalars, vec_norm);

  NodeState<Real> next;
  if (use_nmu) {
    Tensor<Real> gate = ops::tanh(tape, ops::matmul(tape, joint, lp.upd_gate_weight));
    next.scalars = ops::add(tape, ops::matmul(tape, joint, lp.upd_scalar_weight),
                            ops::hadamard(tape, gate, buf.scalars));
    Tensor<Real> vec_gate = ops::matmul(tape, joint, lp.upd_vector_weight);
    for (int c = 0; c < 3; ++c) {
      Tensor<Real> mixed =
          ops::matmul(tape, buf.vectors[static_cast<std::size_t>(c)], lp.upd_vector_mix);
      next.vectors[static_cast<std::size_t>(c)] = ops::hadamard(tape, vec_gate, mixed);
    }
  } else {
    const auto F = static_cast<std::size_t>(state.scalars.cols());
    Tensor<Real> coeffs = lp.upd_mlp.apply(tape, joint);  // M x 3F
    Tensor<Real> a_scalar = ops::slice_cols(tape, coeffs, 0, F);
    Tensor<Real> a_dot = ops::slice_cols(tape, coeffs, F, 2 * F);
    Tensor<Real> a_vector = ops::slice_cols(tape, coeffs, 2 * F, 3 * F);

    std::array<Tensor<Real>, 3> mixed;
    for (int c = 0; c < 3; ++c) {
      mixed[static_cast<std::size_t>(c)] =
          ops::matmul(tape, buf.vectors[static_cast<std::size_t>(c)], lp.upd_vector_mix);
    }
    Tensor<Real> dot = ops::hadamard(tape, mixed[0], norm_mixed[0]);
    dot = ops::add(tape, dot, ops::hadamard(tape, mixed[1], norm_mixed[1]));
    dot = ops::add(tape, dot, ops::hadamard(tape, mixed[2], norm_mixed[2]));

    next.scalars = ops::add(
        tape, state.scalars, ops::add(tape, a_scalar, ops::hadamard(tape, a_dot, dot)));
    for (int c = 0; c < 3; ++c) {
      next.vectors[static_cast<std::size_t>(c)] =
          ops::add(tape, state.vectors[static_cast<std::size_t>(c)],
                   ops::hadamard(tape, a_vector, mixed[static_cast<std::size_t>(c)]));
    }
  }
  return next;
}

/// Push the per-graph global state into every node (residual form).
template <typename Real>
NodeState<Real> global_distribute(Tape<Real>* tape, const NodeState<Real>& state,
                                  const GlobalState<Real>& gs, const BatchGraph<Real>& bg,
                                  const LayerParams<Real>& lp) {
  NodeState<Real> next;
  Tensor<Real> global_rows = ops::gather_rows(tape, gs.scalar, bg.node_graph);
  Tensor<Real> increment =
      lp.dist_mlp.apply(tape, ops::concat_cols(tape, state.scalars, global_rows));
  next.scalars = ops::add(tape, increment, state.scalars);
  for (int c = 0; c < 3; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    Tensor<Real> global_vec = ops::gather_rows(tape, gs.vector[ci], bg.node_graph);
    Tensor<Real> mixed = ops::matmul(tape, ops::add(tape, state.vectors[ci], global_vec),
                                     lp.dist_vector_weight);
    next.vectors[ci] = ops::add(tape, mixed, state.vectors[ci]);
  }
  return next;
}

/// Pull node means back into the per-graph global state (residual form).
template <typename Real>
GlobalState<Real> global_aggregate(Tape<Real>* tape, const NodeState<Real>& state,
                                   const GlobalState<Real>& gs, const BatchGraph<Real>& bg,
                                   const LayerParams<Real>& lp) {
  detail::check(bg.num_nodes >= 1, "global aggregation requires a non-empty graph");
  const auto B = static_cast<std::size_t>(bg.num_graphs);
  GlobalState<Real> next;
  Tensor<Real> mean = ops::segment_mean(tape, state.scalars, bg.node_graph, B);
  next.scalar = ops::add(
      tape, lp.agg_mlp.apply(tape, ops::concat_cols(tape, mean, gs.scalar)), gs.scalar);
  for (int c = 0; c < 3; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    Tensor<Real> mean_vec = ops::segment_mean(tape, state.vectors[ci], bg.node_graph, B);
    Tensor<Real> mixed = ops::matmul(tape, ops::add(tape, mean_vec, gs.vector[ci]),
                                     lp.agg_vector_weight);
    next.vector[ci] = ops::add(tape, mixed, gs.vector[ci]);
  }
  return next;
}

/// Tape-resident forward outputs for a batch. Energies are in normalized
/// network units; Prediction converts to eV via the stored normalization.
template <typename Real>
struct BatchForward {
  BatchGraph<Real> graph;
  Tensor<Real> atom_energy;        // M x 1, network units
  Tensor<Real> graph_energy;       // B x 1, network units
  std::array<Tensor<Real>, 3> force;  // M x 1 each, eV/Angstrom
};

template <typename Real>
BatchForward<Real> forward_on_graph(Tape<Real>* tape, BatchGraph<Real> graph,
                                    const ModelParams<Real>& params) {
  const Hyperparams& hyper = params.hyper;
  hyper.validate();
  BatchForward<Real> result;
  result.graph = std::move(graph);
  const BatchGraph<Real>& bg = result.graph;

  NodeState<Real> state = embed(tape, params, bg);
  GlobalState<Real> gs;
  if (hyper.use_global) gs = initial_global_state(tape, params, bg);

  for (int t = 0; t < hyper.num_layers; ++t) {
    const LayerParams<Real>& lp = params.layers[static_cast<std::size_t>(t)];
    if (hyper.use_global) state = global_distribute(tape, state, gs, bg, lp);
    MessageBuffer<Real> buf = local_message_pass(tape, state, bg, lp);
    state = local_message_update(tape, buf, state, lp, hyper.use_nmu);
    if (hyper.use_global) gs = global_aggregate(tape, state, gs, bg, lp);
  }

  Tensor<Real> atom_e = params.energy_mlp.apply(tape, state.scalars);
  atom_e = ops::add(tape, atom_e, ops::gather_rows(tape, params.species_bias, bg.z));
  result.atom_energy = atom_e;
  result.graph_energy = ops::segment_sum(tape, atom_e, bg.node_graph,
                                         static_cast<std::size_t>(bg.num_graphs));
  for (int c = 0; c < 3; ++c) {
    result.force[static_cast<std::size_t>(c)] =
        ops::matmul(tape, state.vectors[static_cast<std::size_t>(c)], params.force_weight);
  }
  return result;
}

template <typename Real>
BatchForward<Real> forward_batch(Tape<Real>* tape, std::span<const Structure> structures,
                                 const ModelParams<Real>& params) {
  return forward_on_graph(tape, build_batch_graph<Real>(structures, params.hyper), params);
}

/// Model output in physical units.
struct Prediction {
  double energy = 0.0;                 // eV
  std::vector<double> atom_energies;   // eV
  std::vector<Vec3> forces;            // eV/Angstrom
};

/// Convert tape-resident forward outputs into physical-unit predictions.
template <typename Real>
std::vector<Prediction> predictions_from(const BatchForward<Real>& fwd,
                                         const ModelParams<Real>& params) {
  const BatchGraph<Real>& bg = fwd.graph;
  std::vector<Prediction> out(static_cast<std::size_t>(bg.num_graphs));
  for (int gi = 0; gi < bg.num_graphs; ++gi) {
    Prediction& pred = out[static_cast<std::size_t>(gi)];
    double total = 0.0;
    for (int i = bg.graph_offsets[static_cast<std::size_t>(gi)];
         i < bg.graph_offsets[static_cast<std::size_t>(gi) + 1]; ++i) {
      const auto ii = static_cast<std::size_t>(i);
      const double atom_e =
          params.norm.scale * static_cast<double>(fwd.atom_energy.at(ii, 0)) +
          params.norm.ref_for(bg.z[ii]);
      pred.atom_energies.push_back(atom_e);
      total += atom_e;
      pred.forces.push_back({static_cast<double>(fwd.force[0].at(ii, 0)),
                             static_cast<double>(fwd.force[1].at(ii, 0)),
                             static_cast<double>(fwd.force[2].at(ii, 0))});
    }
    pred.energy = total;
  }
  return out;
}

template <typename Real>
std::vector<Prediction> predict_batch(std::span<const Structure> structures,
                                      const ModelParams<Real>& params) {
  return predictions_from(forward_batch<Real>(nullptr, structures, params), params);
}

template <typename Real>
Prediction predict(const Structure& s, const ModelParams<Real>& params) {
  return predict_batch<Real>(std::span<const Structure>(&s, 1), params)[0];
}

}  // namespace leignn
