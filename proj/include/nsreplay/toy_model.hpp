#pragma once

#include "nsreplay/binio.hpp"
#include "nsreplay/common.hpp"
#include "nsreplay/nsgp.hpp"
#include "nsreplay/prototypes.hpp"
#include "nsreplay/rng.hpp"
#include "nsreplay/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace nsreplay {

enum class LayerGroup : std::uint8_t { backbone = 0, neck = 1 };

inline const char* to_string(LayerGroup g) {
    return g == LayerGroup::backbone ? "backbone" : "neck";
}

/// Affine layer under the row-vector convention: y = x * W + b.
struct LinearLayer {
    LayerGroup group = LayerGroup::backbone;
    Matrix weights;  // in x out
    Vector bias;     // out

    Index in_dim() const { return weights.rows(); }
    Index out_dim() const { return weights.cols(); }
};

/// Two-headed feedforward network: a ReLU MLP trunk shared by a growable
/// softmax classifier head and a fixed-width regression head. The trunk's
/// first half is tagged backbone, the rest neck.
struct ToyModel {
    std::vector<LinearLayer> trunk;
    Matrix cls_weights;  // feature_dim x classes (grows)
    Vector cls_bias;
    Matrix reg_weights;  // feature_dim x reg_dim
    Vector reg_bias;
    std::uint64_t revision = 0;

    Index input_dim() const { return trunk.front().in_dim(); }
    Index feature_dim() const { return trunk.back().out_dim(); }
    Index class_count() const { return cls_bias.size(); }
    Index reg_dim() const { return reg_bias.size(); }
};

/// Fresh model with He-initialized trunk and zero heads (classes are added
/// via grow_classifier). `hidden` lists trunk output widths in order.
inline ToyModel make_model(Index input_dim, const std::vector<Index>& hidden, Index reg_dim,
                           std::uint64_t seed) {
    if (hidden.empty()) throw invalid_input("make_model: trunk depth must be >= 1");
    ToyModel model;
    Rng rng = Rng(seed).derive(0xe11);
    Index in = input_dim;
    const std::size_t backbone_layers = (hidden.size() + 1) / 2;
    for (std::size_t l = 0; l < hidden.size(); ++l) {
        LinearLayer layer;
        layer.group = l < backbone_layers ? LayerGroup::backbone : LayerGroup::neck;
        layer.weights = Matrix(in, hidden[l]);
        const double scale = std::sqrt(2.0 / static_cast<double>(in));
        for (Index r = 0; r < in; ++r)
            for (Index c = 0; c < hidden[l]; ++c) layer.weights(r, c) = scale * rng.normal();
        layer.bias = Vector::Zero(hidden[l]);
        model.trunk.push_back(std::move(layer));
        in = hidden[l];
    }
    model.cls_weights = Matrix::Zero(in, 0);
    model.cls_bias = Vector::Zero(0);
    model.reg_weights = Matrix::Zero(in, reg_dim);
    model.reg_bias = Vector::Zero(reg_dim);
    return model;
}

/// Everything backward and the covariance taps need from one forward pass.
/// layer_count() counts the trunk layers plus the two head applications.
struct ForwardTrace {
    std::vector<Matrix> trunk_inputs;  // input to each trunk layer, batch x in_l
    Matrix feature;                    // trunk output = head input, batch x d
    Matrix logits;                     // batch x classes
    Matrix regression;                 // batch x reg_dim
    std::uint64_t revision = 0;

    std::size_t layer_count() const { return trunk_inputs.size() + 2; }
};

/// Batched forward pass; ReLU between trunk layers, none after the last.
inline ForwardTrace forward(const ToyModel& model, const Matrix& inputs) {
    if (inputs.cols() != model.input_dim())
        throw dimension_mismatch("forward: input width " + std::to_string(inputs.cols()) +
                                 " vs model input dim " + std::to_string(model.input_dim()));
    ForwardTrace trace;
    trace.revision = model.revision;
    Matrix h = inputs;
    for (std::size_t l = 0; l < model.trunk.size(); ++l) {
        trace.trunk_inputs.push_back(h);
        Matrix pre = (h * model.trunk[l].weights).rowwise() + model.trunk[l].bias.transpose();
        h = l + 1 < model.trunk.size() ? pre.cwiseMax(0.0) : std::move(pre);
    }
    trace.feature = h;
    trace.logits = (h * model.cls_weights).rowwise() + model.cls_bias.transpose();
    trace.regression = (h * model.reg_weights).rowwise() + model.reg_bias.transpose();
    return trace;
}

inline ForwardTrace forward(const ToyModel& model, const Vector& input) {
    return forward(model, Matrix(input.transpose()));
}

struct Gradients {
    std::vector<Matrix> trunk_weights;
    std::vector<Vector> trunk_bias;
    Matrix cls_weights;
    Vector cls_bias;
    Matrix reg_weights;
    Vector reg_bias;
};

/// Exact backprop from head-output gradients down to every parameter.
/// `d_logits` and `d_regression` are dLoss/dOutput for the two heads.
inline Gradients backward(const ToyModel& model, const ForwardTrace& trace, const Matrix& d_logits,
                          const Matrix& d_regression) {
    if (trace.revision != model.revision)
        throw contract_violation("backward: trace is stale (model parameters changed)");
    if (trace.trunk_inputs.size() != model.trunk.size())
        throw contract_violation("backward: trace depth does not match model");
    if (d_logits.rows() != trace.feature.rows() || d_logits.cols() != model.class_count())
        throw dimension_mismatch("backward: d_logits shape mismatch");
    if (d_regression.rows() != trace.feature.rows() || d_regression.cols() != model.reg_dim())
        throw dimension_mismatch("backward: d_regression shape mismatch");

    Gradients g;
    g.cls_weights = trace.feature.transpose() * d_logits;
    g.cls_bias = d_logits.colwise().sum().transpose();
    g.reg_weights = trace.feature.transpose() * d_regression;
    g.reg_bias = d_regression.colwise().sum().transpose();

    Matrix d_h = d_logits * model.cls_weights.transpose() +
                 d_regression * model.reg_weights.transpose();

    g.trunk_weights.resize(model.trunk.size());
    g.trunk_bias.resize(model.trunk.size());
    for (std::size_t l = model.trunk.size(); l-- > 0;) {
        const Matrix& layer_in = trace.trunk_inputs[l];
        g.trunk_weights[l] = layer_in.transpose() * d_h;
        g.trunk_bias[l] = d_h.colwise().sum().transpose();
        if (l > 0) {
            d_h = d_h * model.trunk[l].weights.transpose();
            // ReLU mask: the recorded input of layer l is ReLU(pre_{l-1}),
            // positive exactly where the unit was active.
            d_h = d_h.cwiseProduct((layer_in.array() > 0.0).cast<double>().matrix());
        }
    }
    return g;
}

/// Appends zero-initialized output columns to the classifier head, leaving
/// logits of pre-existing classes bit-identical.
inline void grow_classifier(ToyModel& model, Index new_class_count) {
    if (new_class_count < 0) throw invalid_input("grow_classifier: negative class count");
    if (new_class_count == 0) return;
    const Index old = model.class_count();
    Matrix w = Matrix::Zero(model.feature_dim(), old + new_class_count);
    w.leftCols(old) = model.cls_weights;
    Vector b = Vector::Zero(old + new_class_count);
    b.head(old) = model.cls_bias;
    model.cls_weights = std::move(w);
    model.cls_bias = std::move(b);
    ++model.revision;
}

struct LossBundle {
    double cls = 0.0;
    double bbox = 0.0;
    double replay = 0.0;
    double total = 0.0;
};

namespace detail {

/// Softmax cross-entropy, mean over the batch; fills dLoss/dlogits.
inline double cross_entropy(const Matrix& logits, const std::vector<int>& labels,
                            Matrix& d_logits) {
    const Index batch = logits.rows();
    d_logits.resize(batch, logits.cols());
    double loss = 0.0;
    for (Index i = 0; i < batch; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= logits.cols())
            throw dimension_mismatch("cross_entropy: label " + std::to_string(y) +
                                     " outside logit range");
        const double mx = logits.row(i).maxCoeff();
        Eigen::RowVectorXd ex = (logits.row(i).array() - mx).exp();
        const double z = ex.sum();
        loss += -(logits(i, y) - mx - std::log(z));
        d_logits.row(i) = ex / z;
        d_logits(i, y) -= 1.0;
    }
    const double inv = 1.0 / static_cast<double>(batch);
    d_logits *= inv;
    return loss * inv;
}

/// Mean squared error over batch and coordinates; fills dLoss/doutput.
inline double mean_squared_error(const Matrix& predicted, const Matrix& target, Matrix& d_out) {
    if (predicted.rows() != target.rows() || predicted.cols() != target.cols())
        throw dimension_mismatch("mean_squared_error: shape mismatch");
    const Matrix diff = predicted - target;
    const double n = static_cast<double>(diff.size());
    d_out = 2.0 / n * diff;
    return diff.squaredNorm() / n;
}

}  // namespace detail

/// Stage loss (current-stage cross-entropy + regression MSE + prototype
/// replay) with its exact parameter gradients. Replay touches only the
/// classifier head: stored prototypes are detached feature vectors.
inline std::pair<LossBundle, Gradients> stage_loss_and_gradients(const ToyModel& model,
                                                                 const ForwardTrace& trace,
                                                                 const std::vector<int>& labels,
                                                                 const Matrix& targets,
                                                                 const PrototypeStore& store) {
    LossBundle loss;
    Matrix d_logits;
    Matrix d_reg;
    loss.cls = detail::cross_entropy(trace.logits, labels, d_logits);
    loss.bbox = detail::mean_squared_error(trace.regression, targets, d_reg);

    Gradients grads = backward(model, trace, d_logits, d_reg);

    if (!store.empty()) {
        const ReplayGrad rg = replay_loss(store, model.cls_weights, model.cls_bias);
        loss.replay = rg.loss;
        grads.cls_weights += rg.d_weights;
        grads.cls_bias += rg.d_bias;
    }
    loss.total = loss.cls + loss.bbox + loss.replay;
    return {loss, grads};
}

struct TrainHyper {
    double learning_rate = 0.02;
    int epochs = 30;
    int batch = 32;
    std::uint64_t seed = 0;
    int cov_stride = 1;  // tap every n-th training input at stage end
};

struct TrainStats {
    std::vector<double> epoch_loss;  // mean total loss per epoch
};

/// One incremental training stage. Trunk gradients pass through the given
/// per-layer projections (weights and bias jointly, via the augmented
/// [x, 1] input axis); head gradients are applied unprojected. When `taps`
/// is provided, the trained model's trunk-layer inputs over the stage's
/// training set are accumulated for an end-of-stage commit by the caller.
inline TrainStats train_stage(ToyModel& model, const StageDataset& stage,
                              const PrototypeStore& store,
                              const std::vector<LayerProjection>& projections,
                              const TrainHyper& hyper,
                              std::vector<CovarianceAccumulator>* taps = nullptr) {
    if (projections.size() != model.trunk.size())
        throw contract_violation("train_stage: need one projection per trunk layer");
    for (std::size_t l = 0; l < model.trunk.size(); ++l)
        if (projections[l].dim() != model.trunk[l].in_dim() + 1)
            throw dimension_mismatch("train_stage: projection dim for trunk layer " +
                                     std::to_string(l) + " must cover the augmented input");
    for (const auto& [cls, p] : store.coarse)
        for (const Sample& s : stage.train)
            if (s.label == cls)
                throw contract_violation("train_stage: store holds current-stage class " +
                                         std::to_string(cls));
    if (hyper.batch < 1) throw invalid_input("train_stage: batch must be >= 1");
    if (hyper.epochs < 0) throw invalid_input("train_stage: epochs must be >= 0");
    if (hyper.learning_rate < 0.0) throw invalid_input("train_stage: negative learning rate");

    const std::size_t n = stage.train.size();
    if (n == 0) throw invalid_input("train_stage: empty training split");

    Matrix inputs(static_cast<Index>(n), model.input_dim());
    Matrix targets(static_cast<Index>(n), model.reg_dim());
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        inputs.row(static_cast<Index>(i)) = stage.train[i].input.transpose();
        targets.row(static_cast<Index>(i)) = stage.train[i].target.transpose();
        labels[i] = stage.train[i].label;
    }

    const double alpha = hyper.learning_rate;
    TrainStats stats;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        Rng shuffle = Rng(hyper.seed).derive(0x5f0 + static_cast<std::uint64_t>(epoch));
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[shuffle.below(i)]);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(hyper.batch)) {
            const std::size_t count = std::min(static_cast<std::size_t>(hyper.batch), n - start);
            Matrix bx(static_cast<Index>(count), model.input_dim());
            Matrix bt(static_cast<Index>(count), model.reg_dim());
            std::vector<int> by(count);
            for (std::size_t i = 0; i < count; ++i) {
                bx.row(static_cast<Index>(i)) = inputs.row(static_cast<Index>(order[start + i]));
                bt.row(static_cast<Index>(i)) = targets.row(static_cast<Index>(order[start + i]));
                by[i] = labels[order[start + i]];
            }

            const ForwardTrace trace = forward(model, bx);
            auto [loss, grads] = stage_loss_and_gradients(model, trace, by, bt, store);
            if (!std::isfinite(loss.total))
                throw numerical_error("train_stage: non-finite loss at epoch " +
                                      std::to_string(epoch) + ", step " + std::to_string(batches));
            loss_sum += loss.total;
            ++batches;

            if (alpha == 0.0) continue;

            for (std::size_t l = 0; l < model.trunk.size(); ++l) {
                // Stack [dW; db] so the augmented projector constrains the
                // whole affine map, keeping old-input layer outputs fixed.
                Matrix stacked(model.trunk[l].in_dim() + 1, model.trunk[l].out_dim());
                stacked.topRows(model.trunk[l].in_dim()) = grads.trunk_weights[l];
                stacked.bottomRows(1) = grads.trunk_bias[l].transpose();
                const Matrix delta = project_gradient(stacked, projections[l]);

                Matrix packed(model.trunk[l].in_dim() + 1, model.trunk[l].out_dim());
                packed.topRows(model.trunk[l].in_dim()) = model.trunk[l].weights;
                packed.bottomRows(1) = model.trunk[l].bias.transpose();
                packed = apply_update(packed, delta, alpha);
                model.trunk[l].weights = packed.topRows(model.trunk[l].in_dim());
                model.trunk[l].bias = packed.bottomRows(1).transpose();
            }
            model.cls_weights = apply_update(model.cls_weights, grads.cls_weights, alpha);
            model.cls_bias -= alpha * grads.cls_bias;
            model.reg_weights = apply_update(model.reg_weights, grads.reg_weights, alpha);
            model.reg_bias -= alpha * grads.reg_bias;
            ++model.revision;
        }
        stats.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }

    if (taps != nullptr) {
        if (taps->size() != model.trunk.size())
            throw contract_violation("train_stage: need one covariance tap per trunk layer");
        const ForwardTrace trace = forward(model, inputs);
        for (std::size_t l = 0; l < model.trunk.size(); ++l) {
            const Matrix& layer_in = trace.trunk_inputs[l];
            Matrix augmented(layer_in.rows(), layer_in.cols() + 1);
            augmented.leftCols(layer_in.cols()) = layer_in;
            augmented.rightCols(1).setOnes();
            const int stride = std::max(hyper.cov_stride, 1);
            for (Index i = 0; i < augmented.rows(); i += stride)
                accumulate_covariance((*taps)[l], Vector(augmented.row(i).transpose()));
        }
    }
    return stats;
}

/// Classification accuracy and regression MSE of the model on a list of
/// samples. Labels outside the classifier's current range count as misses.
struct EvalResult {
    double accuracy = 0.0;
    double mse = 0.0;
};

inline EvalResult evaluate(const ToyModel& model, const std::vector<Sample>& samples) {
    if (samples.empty()) throw invalid_input("evaluate: empty sample list");
    Matrix inputs(static_cast<Index>(samples.size()), model.input_dim());
    for (std::size_t i = 0; i < samples.size(); ++i)
        inputs.row(static_cast<Index>(i)) = samples[i].input.transpose();
    const ForwardTrace trace = forward(model, inputs);

    std::size_t hits = 0;
    double sq = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto row = static_cast<Index>(i);
        if (model.class_count() > 0) {
            Index argmax = 0;
            trace.logits.row(row).maxCoeff(&argmax);
            if (argmax == samples[i].label) ++hits;
        }
        sq += (trace.regression.row(row).transpose() - samples[i].target).squaredNorm();
    }
    EvalResult r;
    r.accuracy = static_cast<double>(hits) / static_cast<double>(samples.size());
    r.mse = sq / (static_cast<double>(samples.size()) * static_cast<double>(model.reg_dim()));
    return r;
}

// --- checkpointing ----------------------------------------------------------

inline std::vector<char> serialize(const ToyModel& model) {
    binio::Writer w;
    binio::write_header(w, binio::PayloadKind::model);
    w.u64(model.trunk.size());
    for (const LinearLayer& layer : model.trunk) {
        w.str(to_string(layer.group));
        w.mat(layer.weights);
        w.vec(layer.bias);
    }
    w.str("cls");
    w.mat(model.cls_weights);
    w.vec(model.cls_bias);
    w.str("reg");
    w.mat(model.reg_weights);
    w.vec(model.reg_bias);
    return w.bytes();
}

inline ToyModel deserialize_model(std::vector<char> bytes) {
    binio::Reader r(std::move(bytes));
    binio::read_header(r, binio::PayloadKind::model);
    ToyModel model;
    const std::uint64_t depth = r.u64();
    for (std::uint64_t l = 0; l < depth; ++l) {
        LinearLayer layer;
        const std::string tag = r.str();
        if (tag == "backbone")
            layer.group = LayerGroup::backbone;
        else if (tag == "neck")
            layer.group = LayerGroup::neck;
        else
            r.fail("unknown trunk layer group '" + tag + "'");
        layer.weights = r.mat();
        layer.bias = r.vec();
        if (layer.bias.size() != layer.weights.cols()) r.fail("trunk bias width mismatch");
        model.trunk.push_back(std::move(layer));
    }
    if (r.str() != "cls") r.fail("expected cls head");
    model.cls_weights = r.mat();
    model.cls_bias = r.vec();
    if (r.str() != "reg") r.fail("expected reg head");
    model.reg_weights = r.mat();
    model.reg_bias = r.vec();
    r.expect_end();
    if (model.trunk.empty()) throw parse_error("model has no trunk layers at byte offset 0");
    return model;
}

inline void save(const ToyModel& model, const std::filesystem::path& path) {
    binio::write_file(path, serialize(model));
}

inline ToyModel load_model(const std::filesystem::path& path) {
    return deserialize_model(binio::read_file(path));
}

}  // namespace nsreplay
