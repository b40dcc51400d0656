#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace infoclust {

/// B images of C x H x W values in [0, 1], stored contiguously image by image.
class ImageBatch {
public:
    ImageBatch() = default;
    ImageBatch(std::size_t count, int channels, int height, int width);

    /// Takes ownership of `values`; throws if the size or value range is wrong.
    ImageBatch(std::size_t count, int channels, int height, int width, std::vector<float> values);

    [[nodiscard]] std::size_t size() const { return count_; }
    [[nodiscard]] int channels() const { return channels_; }
    [[nodiscard]] int height() const { return height_; }
    [[nodiscard]] int width() const { return width_; }
    [[nodiscard]] std::size_t image_size() const
    {
        return static_cast<std::size_t>(channels_) * height_ * width_;
    }

    [[nodiscard]] std::span<const float> values() const { return values_; }
    [[nodiscard]] std::span<float> values() { return values_; }
    [[nodiscard]] std::span<const float> image(std::size_t b) const
    {
        return {values_.data() + b * image_size(), image_size()};
    }
    [[nodiscard]] std::span<float> image(std::size_t b)
    {
        return {values_.data() + b * image_size(), image_size()};
    }
    [[nodiscard]] float at(std::size_t b, int c, int y, int x) const
    {
        return values_[b * image_size() + (static_cast<std::size_t>(c) * height_ + y) * width_ + x];
    }

    /// Images at the given indices, in order.
    [[nodiscard]] ImageBatch gather(std::span<const std::size_t> indices) const;

    [[nodiscard]] bool same_shape(const ImageBatch& other) const
    {
        return count_ == other.count_ && channels_ == other.channels_ && height_ == other.height_ &&
               width_ == other.width_;
    }

private:
    std::size_t count_ = 0;
    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<float> values_;
};

}  // namespace infoclust
