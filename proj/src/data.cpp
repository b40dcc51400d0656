#include "infoclust/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <Eigen/QR>
#include <zlib.h>

#include "infoclust/transforms.hpp"

namespace infoclust {

namespace fs = std::filesystem;

Dataset::Dataset(std::string name, int classes, ImageBatch images)
    : name_(std::move(name)), classes_(classes), images_(std::move(images))
{
    if (classes_ < 2) {
        throw std::invalid_argument("dataset: need at least 2 classes");
    }
    if (images_.size() == 0) {
        throw std::invalid_argument("dataset: no samples");
    }
}

LabelOracle::LabelOracle(std::vector<int> labels, int classes) : labels_(std::move(labels)), classes_(classes)
{
    for (int l : labels_) {
        if (l < 0 || l >= classes_) {
            throw std::out_of_range("labels: class id " + std::to_string(l) + " outside [0, " +
                                    std::to_string(classes_) + ")");
        }
    }
}

Assignment LabelOracle::score(std::span<const int> preds, int clusters) const
{
    if (preds.size() != labels_.size()) {
        throw std::invalid_argument("labels: prediction count does not match dataset size");
    }
    return cluster_accuracy(preds, labels_, clusters, classes_);
}

Assignment LabelOracle::score(std::span<const int> preds, std::span<const std::size_t> rows, int clusters) const
{
    if (preds.size() != rows.size()) {
        throw std::invalid_argument("labels: prediction count does not match row count");
    }
    std::vector<int> sub(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) sub[i] = labels_.at(rows[i]);
    return cluster_accuracy(preds, sub, clusters, classes_);
}

double LabelOracle::agreement(std::span<const int> preds) const
{
    if (preds.size() != labels_.size()) {
        throw std::invalid_argument("labels: prediction count does not match dataset size");
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels_[i] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(labels_.size());
}

double LabelOracle::agreement(std::span<const int> preds, std::span<const std::size_t> rows) const
{
    if (preds.size() != rows.size() || rows.empty()) {
        throw std::invalid_argument("labels: prediction count does not match row count");
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) hit += preds[i] == labels_.at(rows[i]) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(rows.size());
}

std::vector<int> LabelOracle::supervised_targets(std::span<const std::size_t> rows) const
{
    std::vector<int> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = labels_.at(rows[i]);
    return out;
}

std::vector<std::int64_t> LabelOracle::histogram() const
{
    std::vector<std::int64_t> h(static_cast<std::size_t>(classes_), 0);
    for (int l : labels_) ++h[static_cast<std::size_t>(l)];
    return h;
}

ProbeResult LabelOracle::probe(const Matrix& features, const Split& split, const ProbeConfig& config) const
{
    return linear_probe(features, labels_, split.train, split.test, config, classes_);
}

LabelOracle LabelOracle::shuffled(std::uint64_t seed) const
{
    auto copy = labels_;
    std::mt19937_64 rng(seed);
    std::shuffle(copy.begin(), copy.end(), rng);
    return LabelOracle(std::move(copy), classes_);
}

// ---------------------------------------------------------------------------
// IDX

namespace {

struct GzFile {
    gzFile handle = nullptr;
    explicit GzFile(const fs::path& path) : handle(gzopen(path.string().c_str(), "rb"))
    {
        if (handle == nullptr) {
            throw std::runtime_error("cannot open " + path.string());
        }
        gzbuffer(handle, 1 << 20);
    }
    ~GzFile() { gzclose(handle); }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;

    /// Reads exactly n bytes or throws.
    void read(void* dst, std::size_t n, const fs::path& path)
    {
        auto* out = static_cast<unsigned char*>(dst);
        while (n > 0) {
            const auto chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
            const int got = gzread(handle, out, chunk);
            if (got <= 0) {
                throw std::runtime_error(path.string() + ": truncated file");
            }
            out += got;
            n -= static_cast<std::size_t>(got);
        }
    }
    bool at_eof()
    {
        unsigned char c;
        return gzread(handle, &c, 1) == 0;
    }
};

std::uint32_t be32(const unsigned char* p)
{
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

fs::path find_file(const fs::path& dir, const std::vector<std::string>& names)
{
    for (const auto& n : names) {
        for (const auto& candidate : {dir / n, dir / (n + ".gz")}) {
            if (fs::exists(candidate)) return candidate;
        }
    }
    throw std::runtime_error("none of the expected files found in " + dir.string() + " (looked for " + names[0] + ")");
}

/// Images and labels before the labels are sealed into an oracle.
struct Parts {
    std::size_t count = 0;
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values;
    std::vector<int> labels;
};

void append(Parts& into, Parts&& part)
{
    if (into.count == 0) {
        into = std::move(part);
        return;
    }
    if (part.channels != into.channels || part.height != into.height || part.width != into.width) {
        throw std::runtime_error("dataset parts have different image shapes");
    }
    into.values.insert(into.values.end(), part.values.begin(), part.values.end());
    into.labels.insert(into.labels.end(), part.labels.begin(), part.labels.end());
    into.count += part.count;
}

LabeledDataset seal(Parts&& parts, std::string name, int classes)
{
    ImageBatch images(parts.count, parts.channels, parts.height, parts.width, std::move(parts.values));
    return {Dataset(std::move(name), classes, std::move(images)), LabelOracle(std::move(parts.labels), classes)};
}

}  // namespace

IdxArray read_idx(const fs::path& path, std::uint32_t expected_magic)
{
    GzFile f(path);
    unsigned char header[4];
    f.read(header, 4, path);
    const std::uint32_t magic = be32(header);
    if (magic != expected_magic) {
        char buf[64];
        std::snprintf(buf, sizeof buf, ": bad IDX magic 0x%08x (expected 0x%08x)", magic, expected_magic);
        throw std::runtime_error(path.string() + buf);
    }
    const std::size_t rank = magic & 0xff;
    IdxArray out;
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        unsigned char d[4];
        f.read(d, 4, path);
        out.dims.push_back(be32(d));
        count *= out.dims.back();
    }
    out.values.resize(count);
    f.read(out.values.data(), count, path);
    if (!f.at_eof()) {
        throw std::runtime_error(path.string() + ": trailing bytes after IDX payload");
    }
    return out;
}

namespace {

Parts read_idx_pair(const fs::path& images, const fs::path& labels)
{
    const auto img = read_idx(images, kIdxImagesMagic);
    const auto lab = read_idx(labels, kIdxLabelsMagic);
    if (img.dims.size() != 3 || lab.dims.size() != 1) {
        throw std::runtime_error(images.string() + ": unexpected IDX rank");
    }
    if (img.dims[0] != lab.dims[0]) {
        throw std::runtime_error(images.string() + ": image count " + std::to_string(img.dims[0]) +
                                 " does not match label count " + std::to_string(lab.dims[0]));
    }
    Parts p;
    p.count = img.dims[0];
    p.channels = 1;
    p.height = static_cast<int>(img.dims[1]);
    p.width = static_cast<int>(img.dims[2]);
    p.values.resize(img.values.size());
    std::transform(img.values.begin(), img.values.end(), p.values.begin(),
                   [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
    p.labels.assign(lab.values.begin(), lab.values.end());
    return p;
}

Parts read_cifar_file(const fs::path& path)
{
    constexpr std::size_t record = 1 + 3 * 32 * 32;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % record != 0) {
        throw std::runtime_error(path.string() + ": size " + std::to_string(bytes.size()) +
                                 " is not a multiple of the 3073-byte record");
    }
    Parts p;
    p.count = bytes.size() / record;
    p.channels = 3;
    p.height = 32;
    p.width = 32;
    p.values.resize(p.count * (record - 1));
    p.labels.resize(p.count);
    for (std::size_t r = 0; r < p.count; ++r) {
        const unsigned char* rec = bytes.data() + r * record;
        p.labels[r] = rec[0];
        std::transform(rec + 1, rec + record, p.values.begin() + static_cast<std::ptrdiff_t>(r * (record - 1)),
                       [](unsigned char v) { return static_cast<float>(v) / 255.0f; });
    }
    return p;
}

}  // namespace

LabeledDataset load_idx_pair(const fs::path& images, const fs::path& labels, std::string name, int classes)
{
    return seal(read_idx_pair(images, labels), std::move(name), classes);
}

LabeledDataset load_mnist(const fs::path& dir)
{
    Parts all;
    append(all, read_idx_pair(find_file(dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"}),
                              find_file(dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"})));
    append(all, read_idx_pair(find_file(dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"}),
                              find_file(dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"})));
    return seal(std::move(all), "mnist", 10);
}

LabeledDataset load_cifar10_file(const fs::path& path)
{
    return seal(read_cifar_file(path), "cifar10", 10);
}

LabeledDataset load_cifar10(const fs::path& dir)
{
    const fs::path base = fs::exists(dir / "cifar-10-batches-bin") ? dir / "cifar-10-batches-bin" : dir;
    Parts all;
    for (const char* name : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                             "data_batch_5.bin", "test_batch.bin"}) {
        append(all, read_cifar_file(base / name));
    }
    return seal(std::move(all), "cifar10", 10);
}

LabeledDataset load_raw(const fs::path& images, const fs::path& labels, std::string name, int classes)
{
    std::ifstream in(images, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + images.string());
    }
    unsigned char header[16];
    if (!in.read(reinterpret_cast<char*>(header), 16)) {
        throw std::runtime_error(images.string() + ": truncated header");
    }
    Parts p;
    p.count = be32(header);
    p.channels = static_cast<int>(be32(header + 4));
    p.height = static_cast<int>(be32(header + 8));
    p.width = static_cast<int>(be32(header + 12));
    const std::size_t n = p.count * static_cast<std::size_t>(p.channels) * p.height * p.width;
    std::vector<unsigned char> bytes(n * 4);
    if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
        throw std::runtime_error(images.string() + ": truncated payload");
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw std::runtime_error(images.string() + ": trailing bytes after payload");
    }
    p.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* b = bytes.data() + 4 * i;
        const std::uint32_t bits = b[0] | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
        p.values[i] = std::bit_cast<float>(bits);
    }
    const auto lab = read_idx(labels, kIdxLabelsMagic);
    if (lab.dims.size() != 1 || lab.dims[0] != p.count) {
        throw std::runtime_error(labels.string() + ": label count does not match image count");
    }
    p.labels.assign(lab.values.begin(), lab.values.end());
    return seal(std::move(p), std::move(name), classes);
}

void write_raw(const fs::path& path, const ImageBatch& images)
{
    std::ofstream out(path, std::ios::binary);
    const std::uint32_t dims[4] = {static_cast<std::uint32_t>(images.size()), static_cast<std::uint32_t>(images.channels()),
                                   static_cast<std::uint32_t>(images.height()), static_cast<std::uint32_t>(images.width())};
    for (auto d : dims) {
        const unsigned char b[4] = {static_cast<unsigned char>(d >> 24), static_cast<unsigned char>(d >> 16),
                                    static_cast<unsigned char>(d >> 8), static_cast<unsigned char>(d)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    for (float v : images.values()) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                    static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    if (!out) {
        throw std::runtime_error("failed writing " + path.string());
    }
}

LabeledDataset synth_blobs(const BlobSpec& spec)
{
    if (spec.classes < 2 || spec.per_class < 1) {
        throw std::invalid_argument("synth_blobs: need >= 2 classes and >= 1 sample per class");
    }
    const auto dim = static_cast<Eigen::Index>(spec.channels) * spec.height * spec.width;
    std::mt19937_64 rng(mix_seed(spec.seed, 0xb10b5));
    std::normal_distribution<double> normal(0.0, 1.0);

    // Orthonormal directions when the space is wide enough, so every pair of
    // means sits exactly `separation` apart.
    Matrix directions(dim, spec.classes);
    for (Eigen::Index i = 0; i < directions.size(); ++i) directions.data()[i] = normal(rng);
    if (dim >= spec.classes) {
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(directions);
        directions = qr.householderQ() * Eigen::MatrixXd::Identity(dim, spec.classes);
    } else {
        directions.colwise().normalize();
    }
    const Matrix means = directions * (spec.separation / std::sqrt(2.0));

    const std::size_t n = static_cast<std::size_t>(spec.classes) * spec.per_class;
    std::vector<double> raw(n * static_cast<std::size_t>(dim));
    Parts p;
    p.count = n;
    p.channels = spec.channels;
    p.height = spec.height;
    p.width = spec.width;
    p.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int k = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
        p.labels[i] = k;
        for (Eigen::Index d = 0; d < dim; ++d) raw[i * dim + d] = means(d, k) + normal(rng);
    }
    const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
    const double span = *hi - *lo > 0.0 ? *hi - *lo : 1.0;
    p.values.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        p.values[i] = std::clamp(static_cast<float>((raw[i] - *lo) / span), 0.0f, 1.0f);
    }
    return seal(std::move(p), "blobs", spec.classes);
}

BatchIterator::BatchIterator(std::size_t size, std::size_t batch_size, std::uint64_t seed)
    : size_(size), batch_size_(batch_size), seed_(seed)
{
    if (size == 0 || batch_size == 0) {
        throw std::invalid_argument("batch iterator: size and batch size must be positive");
    }
}

std::vector<std::vector<std::size_t>> BatchIterator::epoch_batches(std::int64_t epoch) const
{
    std::vector<std::size_t> order(size_);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(seed_, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = size_; i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < size_; start += batch_size_) {
        const auto end = std::min(size_, start + batch_size_);
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

std::vector<std::vector<std::size_t>> BatchIterator::next_epoch()
{
    return epoch_batches(epoch_++);
}

fs::path data_root()
{
    const char* env = std::getenv("INFOCLUST_DATA_DIR");
    return env != nullptr ? fs::path(env) : fs::path{};
}

}  // namespace infoclust
