// Dataset loading (MNIST IDX, CIFAR-10 binary, raw float container,
// synthetic blobs) and epoch batching.
//
// Labels never travel with the images. Loaders return the images as a
// Dataset and the labels inside a LabelOracle that only answers evaluation
// queries, so training code has no path to ground truth.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "infoclust/eval.hpp"
#include "infoclust/image.hpp"

namespace infoclust {

class Dataset {
public:
    Dataset(std::string name, int classes, ImageBatch images);

    [[nodiscard]] const std::string& name() const { return name_; }
    [[nodiscard]] int classes() const { return classes_; }
    [[nodiscard]] std::size_t size() const { return images_.size(); }
    [[nodiscard]] const ImageBatch& images() const { return images_; }
    [[nodiscard]] ImageBatch batch(std::span<const std::size_t> indices) const { return images_.gather(indices); }

private:
    std::string name_;
    int classes_;
    ImageBatch images_;
};

class LabelOracle {
public:
    LabelOracle(std::vector<int> labels, int classes);

    [[nodiscard]] std::size_t size() const { return labels_.size(); }
    [[nodiscard]] int classes() const { return classes_; }

    /// Best one-to-one mapping accuracy of `preds` (one per sample, in order).
    [[nodiscard]] Assignment score(std::span<const int> preds, int clusters) const;
    /// Same, restricted to the samples `rows`; preds[i] belongs to rows[i].
    [[nodiscard]] Assignment score(std::span<const int> preds, std::span<const std::size_t> rows, int clusters) const;
    /// Fraction with preds[i] == label[i], no remapping.
    [[nodiscard]] double agreement(std::span<const int> preds) const;
    /// Same, for preds[i] belonging to sample rows[i].
    [[nodiscard]] double agreement(std::span<const int> preds, std::span<const std::size_t> rows) const;
    [[nodiscard]] std::vector<std::int64_t> histogram() const;
    [[nodiscard]] ProbeResult probe(const Matrix& features, const Split& split, const ProbeConfig& config) const;

    /// Labels of the given rows, for the supervised fine-tuning protocol only.
    [[nodiscard]] std::vector<int> supervised_targets(std::span<const std::size_t> rows) const;

    /// Copy with labels shuffled among samples (for leakage canaries).
    [[nodiscard]] LabelOracle shuffled(std::uint64_t seed) const;

private:
    std::vector<int> labels_;
    int classes_;
};

struct LabeledDataset {
    Dataset data;
    LabelOracle labels;
};

/// IDX reader (plain or gzip). Returns dims and the raw u8 payload.
struct IdxArray {
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> values;
};
IdxArray read_idx(const std::filesystem::path& path, std::uint32_t expected_magic);

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Images + labels from one IDX pair, pixels scaled by 1/255.
LabeledDataset load_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels,
                             std::string name, int classes);

/// Pooled train + test MNIST (70,000 x 1 x 28 x 28). Looks for the standard
/// file names, optionally with a .gz suffix.
LabeledDataset load_mnist(const std::filesystem::path& dir);

/// One CIFAR-10 binary batch file (3073-byte records).
LabeledDataset load_cifar10_file(const std::filesystem::path& path);
/// Pooled data_batch_1..5 + test_batch (60,000 x 3 x 32 x 32). Accepts the
/// directory itself or its cifar-10-batches-bin child.
LabeledDataset load_cifar10(const std::filesystem::path& dir);

/// Raw container: four big-endian u32 (N, C, H, W) then N*C*H*W little-endian
/// f32 in [0, 1]. Labels come from an IDX1 file.
LabeledDataset load_raw(const std::filesystem::path& images, const std::filesystem::path& labels, std::string name,
                        int classes);
void write_raw(const std::filesystem::path& path, const ImageBatch& images);

struct BlobSpec {
    int classes = 3;
    int per_class = 100;
    int channels = 1;
    int height = 4;
    int width = 4;
    double separation = 10.0;  ///< distance between class means, in units of sigma
    std::uint64_t seed = 0;
};

/// Isotropic unit-variance Gaussian clusters with pairwise mean distance
/// separation * sigma, min-max scaled to [0, 1] as a whole.
LabeledDataset synth_blobs(const BlobSpec& spec);

/// Seeded per-epoch permutations split into batches. The final batch may be short.
class BatchIterator {
public:
    BatchIterator(std::size_t size, std::size_t batch_size, std::uint64_t seed);

    /// Batches of the next epoch; advances the epoch counter.
    std::vector<std::vector<std::size_t>> next_epoch();
    /// Batches for a given epoch without touching the counter.
    [[nodiscard]] std::vector<std::vector<std::size_t>> epoch_batches(std::int64_t epoch) const;

    [[nodiscard]] std::int64_t epoch() const { return epoch_; }
    void set_epoch(std::int64_t epoch) { epoch_ = epoch; }
    [[nodiscard]] std::size_t batch_size() const { return batch_size_; }

private:
    std::size_t size_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::int64_t epoch_ = 0;
};

/// Data location from INFOCLUST_DATA_DIR, or empty when unset.
std::filesystem::path data_root();

}  // namespace infoclust
