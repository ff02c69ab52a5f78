// Fully-convolutional grasp-map regressor operating on the packed sample
// tensors: a strided-conv encoder mirrored by a transposed-conv decoder, four
// squashed output heads (Q, sin2p, cos2p, Wnorm), hand-rolled forward and
// backward passes, Adam training, and a finite-difference gradient audit.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "defgrasp/imaging.hpp"

namespace defgrasp::neural {

using imaging::GraspMap;
using imaging::Image;
using imaging::Tensor;

// One trunk stage: a strided convolution (downsampling) or a transposed
// convolution (upsampling), each followed by ReLU.
struct StageSpec {
  bool transposed = false;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
};

// Network shape. The default is a downscaled GG-CNN: three stride-2
// convolutions (8/16/16 channels, kernels 9/5/3) undone by three mirrored
// transposed convolutions, then four parallel 2-px-kernel heads reading the
// last trunk activation. The encoder and decoder stride products must match
// so predictions keep the input resolution.
struct Arch {
  int in_channels = 2;
  std::vector<StageSpec> stages;
  int head_kernel = 2;

  static Arch standard(int in_channels = 2);
  std::string to_string() const;  // canonical descriptor text
  static Arch parse(const std::string& text);
};

size_t param_count(const Arch& arch);

// Flat parameter store; per layer the kernel block precedes the bias block,
// trunk layers first, then the Q/sin/cos/W heads.
struct NetworkParams {
  Arch arch;
  std::vector<float> values;
};

// He-uniform kernels and zero biases drawn from a stream derived from `seed`.
NetworkParams init_network(const Arch& arch, uint64_t seed);

// Network input from rendered views: channel 0 is depth minus its per-image
// mean, channel 1 (two-channel mode only) the normalized stiffness as-is.
// The one-channel variant is the depth-only baseline.
Tensor make_input(const Image& depth, const Image& stiffness, int in_channels);
Tensor make_input(const imaging::Sample& sample, int in_channels);

// Predicts an H x W x 4 map [Q, sin2p, cos2p, Wnorm]. Q and Wnorm pass
// through a logistic and the angle channels through tanh, so the output
// ranges hold for arbitrary finite inputs.
Tensor forward(const NetworkParams& net, const Tensor& input);

// Wraps a prediction as a grasp map whose mask marks every pixel valid,
// ready for decode_grasps.
GraspMap to_grasp_map(const Tensor& pred);

struct LossWeights {
  double w_q = 1.0;
  double w_angle = 1.0;
  double w_w = 1.0;
};

// Loss terms with their weights already applied.
struct LossParts {
  double q = 0.0;
  double angle = 0.0;
  double w = 0.0;
  double total() const { return q + angle + w; }
};

// Quality is scored over every pixel; the angle term averages the sin and cos
// squared errors and, like the width term, runs over valid-mask pixels only
// and vanishes when the mask is empty.
LossParts masked_loss(const Tensor& pred, const GraspMap& target,
                      const LossWeights& weights = {});

// Adds one sample's parameter gradient into `grad` (zero-filled to size if
// empty) and returns the loss.
LossParts masked_loss_and_grad(const NetworkParams& net, const Tensor& input,
                               const GraspMap& target, const LossWeights& weights,
                               std::vector<float>& grad);

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 100;
  int batch_size = 8;
  uint64_t seed = 0;
  LossWeights weights;
  int input_channels = 2;  // 2 = depth+stiffness, 1 = depth-only baseline
};

struct EpochStats {
  int epoch = 0;
  double loss_q = 0.0;
  double loss_angle = 0.0;
  double loss_w = 0.0;
  double loss_total = 0.0;
};

struct TrainResult {
  NetworkParams net;
  std::vector<EpochStats> history;
};

// Adam (beta 0.9/0.999) over minibatches of packed sample tensors (see
// imaging::pack_sample), reshuffled each epoch from the seed; single-threaded
// and bit-reproducible. Aborts with epoch/batch context if the loss turns
// non-finite.
TrainResult train(const std::vector<Tensor>& dataset, const TrainConfig& config);

void write_history_csv(std::ostream& out, const std::vector<EpochStats>& history);

struct LayerError {
  std::string layer;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<LayerError> per_layer;
};

// Central differences (h = 1e-3) on `probes` randomly chosen parameters,
// evaluated in double precision against the analytic backward pass.
// Magnitudes below 1e-4 are compared against that floor instead of each
// other so a flat coordinate cannot fabricate a large relative error, and a
// probe whose +-h interval flips a ReLU sign is redrawn because the central
// difference does not estimate a derivative across a kink.
GradCheckReport grad_check(const NetworkParams& net, const Tensor& input,
                           const GraspMap& target, const LossWeights& weights = {},
                           uint64_t seed = 0, int probes = 200);

// GNET checkpoint: magic "GNET", u32 version, length-prefixed descriptor
// text, then the float32 parameters in layer order.
void save_network(const std::filesystem::path& path, const NetworkParams& net);
NetworkParams load_network(const std::filesystem::path& path);

}  // namespace defgrasp::neural
