#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "infoclust/data.hpp"

using namespace infoclust;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / ("infoclust_data_" + std::to_string(std::random_device{}())))
    {
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes)
{
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> idx(std::uint32_t magic, std::vector<std::uint32_t> dims, std::vector<unsigned char> payload)
{
    std::vector<unsigned char> out;
    const auto put = [&](std::uint32_t v) {
        for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
    };
    put(magic);
    for (auto d : dims) put(d);
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

/// Lloyd's algorithm with k-means++ seeding; the clustering oracle for blobs.
std::vector<int> kmeans(const ImageBatch& x, int k, std::uint64_t seed)
{
    const std::size_t n = x.size();
    const std::size_t d = x.image_size();
    std::mt19937_64 rng(seed);
    std::vector<std::vector<double>> centers;
    const auto dist2 = [&](std::size_t i, const std::vector<double>& c) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (x.image(i)[j] - c[j]) * (x.image(i)[j] - c[j]);
        return s;
    };
    const auto first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    centers.emplace_back(x.image(first).begin(), x.image(first).end());
    while (static_cast<int>(centers.size()) < k) {
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) {
            double best = 1e300;
            for (const auto& c : centers) best = std::min(best, dist2(i, c));
            w[i] = best;
        }
        const auto pick = std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng);
        centers.emplace_back(x.image(pick).begin(), x.image(pick).end());
    }
    std::vector<int> assign(n, 0);
    for (int iter = 0; iter < 50; ++iter) {
        for (std::size_t i = 0; i < n; ++i) {
            double best = 1e300;
            for (int c = 0; c < k; ++c) {
                const double v = dist2(i, centers[static_cast<std::size_t>(c)]);
                if (v < best) {
                    best = v;
                    assign[i] = c;
                }
            }
        }
        std::vector<std::vector<double>> sum(static_cast<std::size_t>(k), std::vector<double>(d, 0.0));
        std::vector<int> cnt(static_cast<std::size_t>(k), 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++cnt[static_cast<std::size_t>(assign[i])];
            for (std::size_t j = 0; j < d; ++j) sum[static_cast<std::size_t>(assign[i])][j] += x.image(i)[j];
        }
        for (int c = 0; c < k; ++c)
            if (cnt[static_cast<std::size_t>(c)] > 0)
                for (std::size_t j = 0; j < d; ++j)
                    centers[static_cast<std::size_t>(c)][j] = sum[static_cast<std::size_t>(c)][j] / cnt[static_cast<std::size_t>(c)];
    }
    return assign;
}

}  // namespace

TEST_CASE("minimal IDX image file")
{
    TempDir dir;
    write_bytes(dir.path / "img", idx(0x00000803, {2, 1, 1}, {0, 255}));
    write_bytes(dir.path / "lab", idx(0x00000801, {2}, {3, 7}));
    const auto ds = load_idx_pair(dir.path / "img", dir.path / "lab", "tiny", 10);
    REQUIRE(ds.data.size() == 2);
    CHECK(ds.data.images().at(0, 0, 0, 0) == 0.0f);
    CHECK(ds.data.images().at(1, 0, 0, 0) == 1.0f);
    CHECK(ds.labels.agreement(std::vector<int>{3, 7}) == 1.0);
}

TEST_CASE("IDX errors")
{
    TempDir dir;
    write_bytes(dir.path / "bad_magic", idx(0x00000802, {2, 1, 1}, {0, 255}));
    CHECK_THROWS_WITH_AS(read_idx(dir.path / "bad_magic", kIdxImagesMagic), doctest::Contains("magic"),
                         std::runtime_error);
    write_bytes(dir.path / "short", idx(0x00000803, {3, 2, 2}, {0, 1, 2, 3, 4}));
    CHECK_THROWS_WITH_AS(read_idx(dir.path / "short", kIdxImagesMagic), doctest::Contains("truncated"),
                         std::runtime_error);
    write_bytes(dir.path / "img", idx(0x00000803, {2, 1, 1}, {0, 255}));
    write_bytes(dir.path / "lab3", idx(0x00000801, {3}, {1, 2, 3}));
    CHECK_THROWS_WITH_AS(load_idx_pair(dir.path / "img", dir.path / "lab3", "x", 10), doctest::Contains("match"),
                         std::runtime_error);
    CHECK_THROWS(read_idx(dir.path / "missing", kIdxImagesMagic));
}

TEST_CASE("CIFAR records")
{
    TempDir dir;
    std::vector<unsigned char> bytes(2 * 3073);
    bytes[0] = 4;
    bytes[3073] = 9;
    bytes[1] = 255;                 // record 0, red channel, pixel (0, 0)
    bytes[3073 + 1 + 2048 + 33] = 51;  // record 1, blue channel, pixel (1, 1)
    write_bytes(dir.path / "batch.bin", bytes);
    const auto ds = load_cifar10_file(dir.path / "batch.bin");
    REQUIRE(ds.data.size() == 2);
    CHECK(ds.data.images().channels() == 3);
    CHECK(ds.labels.agreement(std::vector<int>{4, 9}) == 1.0);
    CHECK(ds.data.images().at(0, 0, 0, 0) == 1.0f);
    CHECK(ds.data.images().at(1, 2, 1, 1) == doctest::Approx(0.2f));

    bytes.pop_back();
    write_bytes(dir.path / "trunc.bin", bytes);
    CHECK_THROWS_WITH_AS(load_cifar10_file(dir.path / "trunc.bin"), doctest::Contains("3073"), std::runtime_error);
}

TEST_CASE("raw container round trip")
{
    TempDir dir;
    const ImageBatch img(3, 2, 2, 1, {0.f, 0.25f, 0.5f, 1.f, 0.125f, 0.75f, 0.f, 1.f, 0.5f, 0.5f, 0.25f, 0.f});
    write_raw(dir.path / "x.raw", img);
    write_bytes(dir.path / "y.idx", idx(0x00000801, {3}, {0, 1, 1}));
    const auto ds = load_raw(dir.path / "x.raw", dir.path / "y.idx", "raw", 2);
    CHECK(std::equal(img.values().begin(), img.values().end(), ds.data.images().values().begin()));
    CHECK(ds.data.images().channels() == 2);

    // header is big-endian N, C, H, W
    std::ifstream in(dir.path / "x.raw", std::ios::binary);
    unsigned char h[16];
    in.read(reinterpret_cast<char*>(h), 16);
    CHECK(h[3] == 3);
    CHECK(h[7] == 2);
    CHECK(h[11] == 2);
    CHECK(h[15] == 1);

    fs::resize_file(dir.path / "x.raw", 16 + 4 * 11);
    CHECK_THROWS(load_raw(dir.path / "x.raw", dir.path / "y.idx", "raw", 2));
}

TEST_CASE("blobs: separated clusters are recoverable, seed-deterministic, normalized")
{
    BlobSpec spec;
    spec.classes = 3;
    spec.per_class = 200;
    spec.separation = 10.0;
    spec.seed = 5;
    const auto a = synth_blobs(spec);
    const auto b = synth_blobs(spec);
    CHECK(std::equal(a.data.images().values().begin(), a.data.images().values().end(),
                     b.data.images().values().begin()));
    for (float v : a.data.images().values()) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(a.labels.histogram() == std::vector<std::int64_t>{200, 200, 200});
    CHECK(a.labels.score(kmeans(a.data.images(), 3, 1), 3).accuracy >= 0.99);

    spec.separation = 0.0;
    spec.per_class = 1000;
    const auto flat = synth_blobs(spec);
    CHECK(std::abs(flat.labels.score(kmeans(flat.data.images(), 3, 1), 3).accuracy - 1.0 / 3.0) <= 0.05);
}

TEST_CASE("batch iterator epochs are seeded permutations")
{
    BatchIterator it(103, 10, 42);
    const auto e0 = it.next_epoch();
    const auto e1 = it.next_epoch();
    CHECK(it.epoch() == 2);
    CHECK(e0.size() == 11);
    CHECK(e0.back().size() == 3);
    for (const auto& epoch : {e0, e1}) {
        std::vector<std::size_t> all;
        for (const auto& batch : epoch) all.insert(all.end(), batch.begin(), batch.end());
        std::sort(all.begin(), all.end());
        for (std::size_t i = 0; i < 103; ++i) CHECK(all[i] == i);
    }
    CHECK(e0 != e1);
    CHECK(BatchIterator(103, 10, 42).epoch_batches(1) == e1);
    CHECK_THROWS(BatchIterator(0, 10, 1));
}

TEST_CASE("label oracle")
{
    const LabelOracle o({0, 1, 1, 2}, 3);
    CHECK(o.histogram() == std::vector<std::int64_t>{1, 2, 1});
    CHECK(o.score(std::vector<int>{2, 0, 0, 1}, 3).accuracy == 1.0);
    CHECK(o.score(std::vector<int>{0, 0}, std::vector<std::size_t>{1, 2}, 3).accuracy == 1.0);
    const auto s = o.shuffled(3);
    CHECK(s.histogram() == o.histogram());
    CHECK_THROWS(LabelOracle({0, 3}, 3));
}

TEST_CASE("real MNIST files, when available")
{
    const auto root = data_root();
    if (root.empty() || !fs::exists(root / "mnist")) {
        MESSAGE("INFOCLUST_DATA_DIR/mnist not present; skipping");
        return;
    }
    const auto ds = load_mnist(root / "mnist");
    CHECK(ds.data.size() == 70000);
    CHECK(ds.data.classes() == 10);
    const auto h = ds.labels.histogram();
    CHECK(std::accumulate(h.begin(), h.end(), std::int64_t{0}) == 70000);
    CHECK(std::count_if(h.begin(), h.end(), [](auto c) { return c > 0; }) == 10);
    for (float v : ds.data.images().values()) {
        if (!(v >= 0.0f && v <= 1.0f)) {
            FAIL("pixel outside [0, 1]");
        }
    }
}

TEST_CASE("real CIFAR-10 files, when available")
{
    const auto root = data_root();
    if (root.empty() || !fs::exists(root / "cifar10")) {
        MESSAGE("INFOCLUST_DATA_DIR/cifar10 not present; skipping");
        return;
    }
    const auto ds = load_cifar10(root / "cifar10");
    CHECK(ds.data.size() == 60000);
    for (auto c : ds.labels.histogram()) CHECK(c == 6000);
}
