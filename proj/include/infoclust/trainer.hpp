// Experiment configuration, the named presets, the training loop and the
// downstream protocols (evaluation, linear probe, fine-tuning, montages).
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "infoclust/core_math.hpp"
#include "infoclust/data.hpp"
#include "infoclust/model.hpp"
#include "infoclust/transforms.hpp"

namespace infoclust {

struct DatasetConfig {
    std::string name = "mnist";  ///< mnist | cifar10 | blobs | raw
    std::string path;            ///< directory or raw image file; relative paths resolve against INFOCLUST_DATA_DIR
    std::string labels;          ///< raw: IDX1 label file
    int classes = 10;            ///< raw only; other datasets fix it
    std::size_t limit = 0;       ///< use only the first `limit` samples (0 = all)
    BlobSpec blobs;
};

struct HeadLayout {
    int primary = 1;
    int overcluster = 0;
    int overcluster_width = 50;
};

struct ExperimentConfig {
    std::string name = "custom";
    DatasetConfig dataset;
    std::uint64_t seed = 0;
    int epochs = 100;
    std::size_t batch_size = 256;
    LossComposition loss;
    std::map<std::string, TransformSpec> transforms;
    HeadLayout heads;
    std::string backbone = "conv";  ///< conv (desk default) | mlp (hidden layer only, for non-spatial data)
    AdamConfig optimizer;
    int eval_every = 5;
    std::size_t eval_limit = 0;  ///< evaluate on the first N samples (0 = all)
    bool record_time = true;     ///< false writes 0 in the seconds column (byte-stable CSVs)
    bool normalize_input = true; ///< standardize channels with dataset statistics inside the model
    std::string out_dir = "runs/out";

    /// Throws std::invalid_argument with the first problem found.
    void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Rows a..w of the experiment table plus best_1h1o (== w) and best_5h5o
/// (w with 5 primary and 5 over-clustering heads). Transform defaults are
/// adapted to `dataset` (no flips on digits, smaller VAT radius on blobs).
ExperimentConfig preset(const std::string& name, const std::string& dataset = "mnist");
std::vector<std::string> preset_names();

LabeledDataset load_dataset(const DatasetConfig& config);
Architecture architecture_for(const ExperimentConfig& config, const Dataset& data);
/// Per-channel mean and standard deviation over all pixels.
std::pair<std::vector<float>, std::vector<float>> channel_statistics(const ImageBatch& images);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
    std::vector<std::size_t> heads;    ///< evaluated (primary) head ids
    std::vector<double> accuracy;      ///< one per entry of `heads`
};

/// Scores a model's primary heads. The training loop only ever sees this
/// callable, never the labels.
using Evaluator = std::function<EvalResult(const ClusterModel&)>;

Evaluator make_evaluator(const Dataset& data, const LabelOracle& labels, std::size_t limit = 0);

/// Argmax cluster of every sample for one head, evaluated in chunks.
std::vector<int> predict(const ClusterModel& model, const ImageBatch& images, std::size_t head,
                         std::size_t chunk = 1024);

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
    int epoch = 0;
    std::map<std::string, double> terms;  ///< mean over the epoch's batches (first batch for epoch 0)
    std::vector<double> head_losses;      ///< per head, same averaging
    std::optional<EvalResult> eval;
    std::size_t selected_head = 0;
    double seconds = 0.0;
};

struct RunResult {
    ClusterModel model;
    std::vector<EpochRecord> history;  ///< every epoch, evaluated or not
    double final_selected_accuracy = 0.0;
    std::size_t selected_head = 0;
};

struct RunOptions {
    bool resume = false;
    bool write_files = true;
    bool quiet = false;
};

/// Full training run. Writes metrics.csv, config.json and checkpoint.bin into
/// config.out_dir when write_files is set. Throws std::runtime_error on a
/// non-finite loss.
RunResult train(const ExperimentConfig& config, const Dataset& data, const Evaluator& evaluate,
                const RunOptions& options = {});

struct SeedSummary {
    std::vector<std::uint64_t> seeds;
    std::vector<double> accuracy;
    double mean = 0.0;
    double stddev = 0.0;
};

/// Runs seeds seed, seed+1, ... into out_dir/seed_<s> and writes summary.json.
SeedSummary train_seeds(const ExperimentConfig& config, int count, const Dataset& data, const Evaluator& evaluate,
                        const RunOptions& options = {});

/// Head-averaged loss on one batch plus parameter gradients. Exposed for tests.
struct StepOutput {
    LossValue loss;
    std::vector<double> head_losses;
    ParameterSet<float> grads;
};
StepOutput loss_and_grad(const ExperimentConfig& config, const ClusterModel& model, const ImageBatch& batch,
                         std::uint64_t step_seed);

// ---------------------------------------------------------------------------
// Downstream protocols

enum class Tap { fc, conv, y };
Tap tap_from_string(const std::string& name);
Matrix extract_features(const ClusterModel& model, const ImageBatch& images, Tap tap, std::size_t head = 0,
                        std::size_t chunk = 1024);

inline TransformSpec geometric_augmentation()
{
    TransformSpec s;
    s.kind = TransformKind::geometric;
    return s;
}

struct FinetuneConfig {
    std::size_t labeled = 5000;
    std::size_t test = 10000;
    int epochs = 10;
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    bool augment = false;
    TransformSpec augmentation = geometric_augmentation();
    std::uint64_t seed = 0;
};

struct FinetuneResult {
    double test_accuracy = 0.0;
    std::vector<double> accuracy_per_epoch;  ///< entry e is after e epochs (entry 0 = before training)
};

/// Supervised training of `init` (or a fresh model when null) with a new
/// classifier head. Labels are read from the oracle; this is the only mode
/// that does so.
FinetuneResult finetune(const ClusterModel* init, const Architecture& arch, const Dataset& data,
                        const LabelOracle& labels, const FinetuneConfig& config);

struct MontageLayout {
    std::vector<std::vector<std::size_t>> rows;  ///< sample ids per cluster row (may be short or empty)
    int width = 0;
    int height = 0;
};

/// K x S grid of random samples per argmax cluster, written as PNG.
MontageLayout write_montage(const ClusterModel& model, const Dataset& data, std::size_t head, int per_cluster,
                            std::uint64_t seed, const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, int width, int height, int channels,
               const std::vector<std::uint8_t>& pixels);

}  // namespace infoclust
