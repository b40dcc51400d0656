#include "infoclust/image.hpp"

#include <cmath>
#include <stdexcept>

namespace infoclust {

ImageBatch::ImageBatch(std::size_t count, int channels, int height, int width)
    : ImageBatch(count, channels, height, width,
                 std::vector<float>(count * static_cast<std::size_t>(channels) * height * width, 0.0f))
{
}

ImageBatch::ImageBatch(std::size_t count, int channels, int height, int width, std::vector<float> values)
    : count_(count), channels_(channels), height_(height), width_(width), values_(std::move(values))
{
    if (channels < 1 || height < 1 || width < 1) {
        throw std::invalid_argument("ImageBatch: non-positive dimension");
    }
    if (values_.size() != count * image_size()) {
        throw std::invalid_argument("ImageBatch: value count does not match dimensions");
    }
    for (float v : values_) {
        if (!(v >= 0.0f && v <= 1.0f)) {
            throw std::invalid_argument("ImageBatch: value outside [0, 1]");
        }
    }
}

ImageBatch ImageBatch::gather(std::span<const std::size_t> indices) const
{
    ImageBatch out(indices.size(), channels_, height_, width_);
    const std::size_t n = image_size();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= count_) {
            throw std::out_of_range("ImageBatch::gather: index out of range");
        }
        std::copy_n(values_.data() + indices[i] * n, n, out.values_.data() + i * n);
    }
    return out;
}

}  // namespace infoclust
