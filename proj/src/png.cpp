#include <fstream>
#include <stdexcept>
#include <string>

#include <zlib.h>

#include "infoclust/trainer.hpp"

namespace infoclust {

namespace {

void put_be32(std::string& out, std::uint32_t v)
{
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

void chunk(std::ofstream& out, const char* type, const std::string& data)
{
    std::string buf;
    put_be32(buf, static_cast<std::uint32_t>(data.size()));
    buf.append(type, 4);
    buf += data;
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(buf.data() + 4), static_cast<uInt>(buf.size() - 4));
    put_be32(buf, static_cast<std::uint32_t>(crc));
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

}  // namespace

void write_png(const std::filesystem::path& path, int width, int height, int channels,
               const std::vector<std::uint8_t>& pixels)
{
    if (width < 1 || height < 1 || (channels != 1 && channels != 3)) {
        throw std::invalid_argument("png: unsupported dimensions");
    }
    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    if (pixels.size() != stride * height) {
        throw std::invalid_argument("png: pixel buffer size mismatch");
    }
    std::string raw;
    raw.reserve((stride + 1) * height);
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        raw.append(reinterpret_cast<const char*>(pixels.data() + y * stride), stride);
    }
    uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
    std::string packed(packed_size, '\0');
    if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), Z_BEST_COMPRESSION) != Z_OK) {
        throw std::runtime_error("png: compression failed");
    }
    packed.resize(packed_size);

    std::string ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(width));
    put_be32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);                            // bit depth
    ihdr.push_back(channels == 3 ? 2 : 0);        // truecolor or grayscale
    ihdr.append(3, '\0');                         // compression, filter, interlace

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("png: cannot write " + path.string());
    }
    out.write("\x89PNG\r\n\x1a\n", 8);
    chunk(out, "IHDR", ihdr);
    chunk(out, "IDAT", packed);
    chunk(out, "IEND", "");
}

}  // namespace infoclust
