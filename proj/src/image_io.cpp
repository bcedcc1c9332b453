#include "latentmark/image_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "latentmark/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace latentmark {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    return f;
}

void write_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw IoError("truncated file: " + path);
    return v;
}

// Skips PNM whitespace and '#' comments, then parses a non-negative integer.
int pnm_int(std::ifstream& f, const std::string& path) {
    int ch = f.get();
    while (ch == '#' || std::isspace(ch)) {
        if (ch == '#')
            while (ch != '\n' && ch != EOF) ch = f.get();
        ch = f.get();
    }
    if (ch == EOF) throw IoError("truncated pnm header: " + path);
    int value = 0;
    bool any = false;
    while (std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        any = true;
        ch = f.get();
    }
    if (!any) throw IoError("malformed pnm header: " + path);
    return value;
}

void save_pnm(const ImageTensor& img, const std::string& path) {
    std::ofstream f = open_out(path);
    const bool color = img.shape.c == 3;
    f << (color ? "P6" : "P5") << "\n" << img.shape.w << " " << img.shape.h << "\n255\n";
    if (!color) {
        f.write(reinterpret_cast<const char*>(img.data.data()),
                static_cast<std::streamsize>(img.data.size()));
    } else {
        std::vector<std::uint8_t> row(static_cast<std::size_t>(img.shape.w) * 3);
        for (int y = 0; y < img.shape.h; ++y) {
            for (int x = 0; x < img.shape.w; ++x)
                for (int c = 0; c < 3; ++c)
                    row[static_cast<std::size_t>(x) * 3 + c] = img.at(c, y, x);
            f.write(reinterpret_cast<const char*>(row.data()),
                    static_cast<std::streamsize>(row.size()));
        }
    }
    if (!f) throw IoError("write failed: " + path);
}

ImageTensor load_pnm(std::ifstream& f, bool color, const std::string& path) {
    const int w = pnm_int(f, path);
    const int h = pnm_int(f, path);
    const int maxval = pnm_int(f, path);
    if (maxval != 255) throw IoError("unsupported pnm maxval " + std::to_string(maxval) + ": " + path);
    ImageTensor img(Shape{color ? 3 : 1, h, w});
    if (!color) {
        f.read(reinterpret_cast<char*>(img.data.data()),
               static_cast<std::streamsize>(img.data.size()));
        if (!f) throw IoError("truncated pnm payload: " + path);
    } else {
        std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
        for (int y = 0; y < h; ++y) {
            f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
            if (!f) throw IoError("truncated pnm payload: " + path);
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    img.at(c, y, x) = row[static_cast<std::size_t>(x) * 3 + c];
        }
    }
    return img;
}

void save_lmf1_raw(const Shape& shape, const double* data, const std::string& path) {
    std::ofstream f = open_out(path);
    f.write("LMF1", 4);
    write_u32(f, static_cast<std::uint32_t>(shape.c));
    write_u32(f, static_cast<std::uint32_t>(shape.h));
    write_u32(f, static_cast<std::uint32_t>(shape.w));
    f.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(shape.volume() * sizeof(double)));
    if (!f) throw IoError("write failed: " + path);
}

LatentTensor load_lmf1_raw(std::ifstream& f, const std::string& path) {
    const int c = static_cast<int>(read_u32(f, path));
    const int h = static_cast<int>(read_u32(f, path));
    const int w = static_cast<int>(read_u32(f, path));
    Shape shape{c, h, w};
    if (c <= 0 || h <= 0 || w <= 0 || shape.volume() > (1u << 24))
        throw IoError("implausible tensor shape in " + path);
    LatentTensor z(shape);
    f.read(reinterpret_cast<char*>(z.data.data()),
           static_cast<std::streamsize>(z.data.size() * sizeof(double)));
    if (!f) throw IoError("truncated file: " + path);
    return z;
}

}  // namespace

std::string image_extension_for(const Shape& s) {
    if (s.c == 1) return ".pgm";
    if (s.c == 3) return ".ppm";
    return ".lmf1";
}

void save_image(const ImageTensor& img, const std::string& path) {
    if (ends_with(path, ".pgm")) {
        if (img.shape.c != 1)
            throw ConfigError("save_image: .pgm requires 1 channel, got " +
                              std::to_string(img.shape.c));
        save_pnm(img, path);
    } else if (ends_with(path, ".ppm")) {
        if (img.shape.c != 3)
            throw ConfigError("save_image: .ppm requires 3 channels, got " +
                              std::to_string(img.shape.c));
        save_pnm(img, path);
    } else if (ends_with(path, ".lmf1")) {
        std::vector<double> vals(img.data.begin(), img.data.end());
        save_lmf1_raw(img.shape, vals.data(), path);
    } else {
        throw ConfigError("save_image: unsupported extension in " + path);
    }
}

ImageTensor load_image(const std::string& path) {
    std::ifstream f = open_in(path);
    char magic[4] = {0, 0, 0, 0};
    f.read(magic, 2);
    if (!f) throw IoError("truncated file: " + path);
    if (magic[0] == 'P' && (magic[1] == '5' || magic[1] == '6'))
        return load_pnm(f, magic[1] == '6', path);
    f.read(magic + 2, 2);
    if (f && std::memcmp(magic, "LMF1", 4) == 0) {
        LatentTensor z = load_lmf1_raw(f, path);
        ImageTensor img(z.shape);
        for (std::size_t i = 0; i < z.data.size(); ++i) {
            const double v = z.data[i];
            if (!(v >= 0.0 && v <= 255.0) || v != std::nearbyint(v))
                throw IoError("non 8-bit pixel value in image container: " + path);
            img.data[i] = static_cast<std::uint8_t>(v);
        }
        return img;
    }
    throw IoError("unrecognized image format: " + path);
}

void save_latent_lmf1(const LatentTensor& z, const std::string& path) {
    save_lmf1_raw(z.shape, z.data.data(), path);
}

LatentTensor load_latent_lmf1(const std::string& path) {
    std::ifstream f = open_in(path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "LMF1", 4) != 0)
        throw IoError("not an LMF1 file: " + path);
    return load_lmf1_raw(f, path);
}

}  // namespace latentmark
