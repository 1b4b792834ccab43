#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "augsearch/volume.hpp"

namespace augsearch {

struct LayerShape {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;

  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t t = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Flat parameter vector of a segmentation network plus its optimizer state.
struct ModelWeights {
  std::vector<double> params;
  std::vector<LayerShape> layout;
  AdamState adam;
  int channels = 0;
  int n_classes = 0;

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

/// Patches of equal size with matching labels.
struct Batch {
  std::vector<Volume> images;
  std::vector<LabelVolume> labels;

  Dims patch_dims() const { return images.empty() ? Dims{} : images.front().dims; }
  /// Throws std::invalid_argument when empty, ragged or mismatched.
  void validate() const;
};

struct LossValue {
  double total = 0.0;
  double dice_part = 0.0;  // 1 - mean foreground soft Dice
  double ce_part = 0.0;    // mean voxelwise cross-entropy
};

inline constexpr double kDiceSmooth = 1e-5;

/// Number of parameters of the built-in network.
std::size_t tiny_segnet_param_count(int channels, int n_classes);

/// Built-in network: conv3^3(1->C) ReLU conv3^3(C->C) ReLU conv1^3(C->K),
/// voxelwise softmax. Zero "same" padding keeps output dims equal to input.
/// He-uniform weights, zero biases, deterministic per seed.
ModelWeights init_model(int n_classes, int channels = 8, std::uint64_t seed = 0);

/// Class probabilities for one image: n_classes planes of dims.count() values.
std::vector<double> predict_proba(const ModelWeights& w, const Volume& image);

/// Soft Dice (foreground classes, batch-aggregated) + cross-entropy computed
/// directly from probabilities. probs holds one [K x voxels] block per item.
LossValue loss_from_probabilities(std::span<const std::vector<double>> probs,
                                  std::span<const LabelVolume> labels, int n_classes);

/// Loss and its gradient with respect to w.params (gradient resized to match).
/// Throws NumericError on non-finite values.
LossValue loss_and_grad(const ModelWeights& w, const Batch& batch, std::vector<double>& grad);

/// Loss only.
LossValue loss(const ModelWeights& w, const Batch& batch);

struct AdamConfig {
  double lr = 3e-4;
  double weight_decay = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// In-place ADAM with decoupled weight decay.
void adam_update(ModelWeights& w, std::span<const double> grad, const AdamConfig& cfg);

/// Value-returning form of adam_update.
ModelWeights adam_step(ModelWeights w, std::span<const double> grad, double lr, double weight_decay);

/// Deep copy including optimizer moments.
ModelWeights snapshot(const ModelWeights& w);

/// Returns a state equal to `snap`. Throws std::invalid_argument when the
/// layouts differ.
ModelWeights restore(const ModelWeights& w, const ModelWeights& snap);

/// Window start offsets along one axis. When n > patch the windows overhang
/// both ends by patch/2 (zero padded), so every voxel is covered at least
/// twice; when n == patch there is a single window at 0.
std::vector<int> window_starts(int n, int patch);

/// Sliding-window inference with stride patch/2: probabilities of all
/// covering windows are averaged, then argmax. Throws std::invalid_argument
/// when the patch is larger than the image.
LabelVolume sliding_window_predict(const ModelWeights& w, const Volume& image, Dims patch, int n_classes);

/// Hard Dice per foreground class (index k-1 for class k). A class absent
/// from both volumes scores 1.
std::vector<double> hard_dice(const LabelVolume& pred, const LabelVolume& truth);

/// Interface the search engine trains through; any differentiable
/// segmentation model can plug in.
class SegmentationLearner {
 public:
  virtual ~SegmentationLearner() = default;
  virtual ModelWeights init(std::uint64_t seed) const = 0;
  virtual LossValue loss_and_grad(const ModelWeights& w, const Batch& batch, std::vector<double>& grad) const = 0;
  virtual std::vector<double> predict_proba(const ModelWeights& w, const Volume& image) const = 0;
  virtual int n_classes() const = 0;
};

/// The built-in network behind the SegmentationLearner interface.
class TinySegNet final : public SegmentationLearner {
 public:
  explicit TinySegNet(int n_classes = 2, int channels = 8) : n_classes_(n_classes), channels_(channels) {}

  ModelWeights init(std::uint64_t seed) const override { return init_model(n_classes_, channels_, seed); }
  LossValue loss_and_grad(const ModelWeights& w, const Batch& batch, std::vector<double>& grad) const override {
    return augsearch::loss_and_grad(w, batch, grad);
  }
  std::vector<double> predict_proba(const ModelWeights& w, const Volume& image) const override {
    return augsearch::predict_proba(w, image);
  }
  int n_classes() const override { return n_classes_; }
  int channels() const { return channels_; }

 private:
  int n_classes_;
  int channels_;
};

LabelVolume sliding_window_predict(const SegmentationLearner& learner, const ModelWeights& w, const Volume& image,
                                   Dims patch);

/// Learning-rate decay when the monitored loss stops improving.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.2, int patience = 30, double min_lr = 1e-7)
      : lr_(lr), factor_(factor), patience_(patience), min_lr_(min_lr) {}

  /// Feeds one epoch's loss; returns the learning rate to use next.
  double observe(double loss);
  double lr() const { return lr_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  double min_lr_;
  double best_ = 1e300;
  int bad_epochs_ = 0;
};

/// Binary checkpoint: "AUGW", u32 header length, JSON layout header, then
/// little-endian f32 params. Optimizer moments are not stored.
void write_checkpoint(const std::string& path, const ModelWeights& w);
ModelWeights read_checkpoint(const std::string& path);

}  // namespace augsearch
