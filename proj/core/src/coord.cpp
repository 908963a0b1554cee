#include "ofa/coord.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace ofa {

void BBox::validate() const {
    for (double c : {x1, y1, x2, y2}) {
        if (!(c >= 0.0 && c <= 1.0)) {
            throw DataError("bbox coordinate " + std::to_string(c) + " outside [0,1]");
        }
    }
    if (x1 > x2 || y1 > y2) throw DataError("bbox corners out of order");
}

ImageGrid ImageGrid::filled(int width, int height, uint8_t r, uint8_t g, uint8_t b) {
    ImageGrid img;
    img.width = width;
    img.height = height;
    img.pixels.resize(static_cast<size_t>(width) * height * 3);
    for (size_t i = 0; i < img.pixels.size(); i += 3) {
        img.pixels[i] = r;
        img.pixels[i + 1] = g;
        img.pixels[i + 2] = b;
    }
    return img;
}

void ImageGrid::set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    const size_t i = (static_cast<size_t>(y) * width + x) * 3;
    pixels[i] = r;
    pixels[i + 1] = g;
    pixels[i + 2] = b;
}

std::array<int, 4> box_to_bins(const BBox& b, int num_bins) {
    if (num_bins <= 0) throw UsageError("box_to_bins: num_bins must be positive");
    b.validate();
    auto bin = [num_bins](double c) {
        return std::min(static_cast<int>(std::floor(c * num_bins)), num_bins - 1);
    };
    return {bin(b.x1), bin(b.y1), bin(b.x2), bin(b.y2)};
}

BBox bins_to_box(const std::array<int, 4>& bins, int num_bins) {
    if (num_bins <= 0) throw UsageError("bins_to_box: num_bins must be positive");
    for (int v : bins) {
        if (v < 0 || v >= num_bins) throw DecodeError("bin " + std::to_string(v) + " out of range");
    }
    auto center = [num_bins](int v) { return (v + 0.5) / num_bins; };
    return BBox{center(bins[0]), center(bins[1]), center(bins[2]), center(bins[3])};
}

std::array<int, 4> box_to_tokens(const BBox& b, const UnifiedVocab& v) {
    const auto bins = box_to_bins(b, v.num_loc_bins());
    return {v.loc_id(bins[0]), v.loc_id(bins[1]), v.loc_id(bins[2]), v.loc_id(bins[3])};
}

BBox tokens_to_box(std::span<const int> ids, const UnifiedVocab& v) {
    if (ids.size() != 4) {
        throw DecodeError("box decode: expected 4 location tokens, got " + std::to_string(ids.size()));
    }
    std::array<int, 4> bins{};
    for (size_t i = 0; i < 4; ++i) {
        if (!v.is_loc(ids[i])) {
            throw DecodeError("box decode: id " + std::to_string(ids[i]) + " is not a location token");
        }
        bins[i] = v.loc_bin(ids[i]);
    }
    return bins_to_box(bins, v.num_loc_bins());
}

std::vector<double> pool_block(const ImageGrid& img, int x0, int y0) {
    constexpr int sub = kPatchPx / kPoolGrid;  // 4x4 pixels per pooled cell
    std::vector<double> out(kBlockDim, 0.0);
    for (int py = 0; py < kPoolGrid; ++py) {
        for (int px = 0; px < kPoolGrid; ++px) {
            double acc[3] = {0, 0, 0};
            for (int dy = 0; dy < sub; ++dy)
                for (int dx = 0; dx < sub; ++dx)
                    for (int c = 0; c < 3; ++c)
                        acc[c] += img.at(x0 + px * sub + dx, y0 + py * sub + dy, c);
            const size_t base = (static_cast<size_t>(py) * kPoolGrid + px) * 3;
            for (int c = 0; c < 3; ++c) out[base + c] = acc[c] / (sub * sub * 255.0);
        }
    }
    return out;
}

int Codebook::nearest(const std::vector<double>& block) const {
    if (centers.empty()) throw DataError("codebook is empty");
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < size(); ++k) {
        double d = 0.0;
        const auto& c = centers[static_cast<size_t>(k)];
        for (size_t i = 0; i < c.size(); ++i) {
            const double diff = block[i] - c[i];
            d += diff * diff;
        }
        if (d < best_d) {  // strict: ties keep the lowest id
            best_d = d;
            best = k;
        }
    }
    return best;
}

Codebook Codebook::train(const std::vector<const ImageGrid*>& images, int k, uint64_t seed,
                         int iterations) {
    if (k <= 0) throw UsageError("codebook: k must be positive");
    std::vector<std::vector<double>> blocks;
    for (const ImageGrid* img : images) {
        if (img->width % kPatchPx != 0 || img->height % kPatchPx != 0) {
            throw ShapeError("codebook: image " + std::to_string(img->width) + "x" +
                             std::to_string(img->height) + " not divisible by " +
                             std::to_string(kPatchPx));
        }
        for (int y = 0; y < img->height; y += kPatchPx)
            for (int x = 0; x < img->width; x += kPatchPx) blocks.push_back(pool_block(*img, x, y));
    }
    if (blocks.empty()) throw DataError("codebook: no training blocks");

    Rng rng(seed);
    Codebook cb;
    cb.centers.resize(static_cast<size_t>(k));
    for (auto& c : cb.centers) c = blocks[rng.below(blocks.size())];

    std::vector<int> assign(blocks.size(), 0);
    for (int it = 0; it < iterations; ++it) {
        for (size_t i = 0; i < blocks.size(); ++i) assign[i] = cb.nearest(blocks[i]);
        std::vector<std::vector<double>> sums(static_cast<size_t>(k),
                                              std::vector<double>(kBlockDim, 0.0));
        std::vector<int64_t> counts(static_cast<size_t>(k), 0);
        for (size_t i = 0; i < blocks.size(); ++i) {
            auto& s = sums[static_cast<size_t>(assign[i])];
            for (int d = 0; d < kBlockDim; ++d) s[static_cast<size_t>(d)] += blocks[i][static_cast<size_t>(d)];
            ++counts[static_cast<size_t>(assign[i])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) {
                cb.centers[static_cast<size_t>(c)] = blocks[rng.below(blocks.size())];
                continue;
            }
            for (int d = 0; d < kBlockDim; ++d)
                cb.centers[static_cast<size_t>(c)][static_cast<size_t>(d)] =
                    sums[static_cast<size_t>(c)][static_cast<size_t>(d)] / counts[static_cast<size_t>(c)];
        }
    }
    return cb;
}

void Codebook::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f << "#ofa-codebook k=" << size() << " dim=" << kBlockDim << "\n";
    f.precision(17);
    for (const auto& c : centers) {
        for (size_t d = 0; d < c.size(); ++d) f << (d ? " " : "") << c[d];
        f << "\n";
    }
    if (!f) throw DataError("write failed: " + path);
}

Codebook Codebook::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path);
    std::string header;
    std::getline(f, header);
    int k = -1, dim = -1;
    if (std::sscanf(header.c_str(), "#ofa-codebook k=%d dim=%d", &k, &dim) != 2 || dim != kBlockDim) {
        throw DataError("bad codebook header in " + path);
    }
    Codebook cb;
    cb.centers.resize(static_cast<size_t>(k), std::vector<double>(kBlockDim));
    for (int c = 0; c < k; ++c)
        for (int d = 0; d < dim; ++d)
            if (!(f >> cb.centers[static_cast<size_t>(c)][static_cast<size_t>(d)]))
                throw DataError("truncated codebook " + path);
    return cb;
}

CodeGrid quantize_image(const ImageGrid& img, const Codebook& cb) {
    if (img.width != img.height) throw ShapeError("quantize_image: image must be square");
    if (img.width % kPatchPx != 0) {
        throw ShapeError("quantize_image: side " + std::to_string(img.width) +
                         " not divisible by " + std::to_string(kPatchPx));
    }
    CodeGrid cg;
    cg.side = img.width / kPatchPx;
    cg.codes.reserve(static_cast<size_t>(cg.side) * cg.side);
    for (int by = 0; by < cg.side; ++by)
        for (int bx = 0; bx < cg.side; ++bx)
            cg.codes.push_back(cb.nearest(pool_block(img, bx * kPatchPx, by * kPatchPx)));
    return cg;
}

ImageGrid dequantize_image(const CodeGrid& cg, const Codebook& cb) {
    if (static_cast<int>(cg.codes.size()) != cg.side * cg.side) {
        throw ShapeError("dequantize_image: code count does not match side^2");
    }
    const int px = cg.side * kPatchPx;
    ImageGrid img = ImageGrid::filled(px, px, 0, 0, 0);
    constexpr int sub = kPatchPx / kPoolGrid;
    for (int by = 0; by < cg.side; ++by) {
        for (int bx = 0; bx < cg.side; ++bx) {
            const int code = cg.codes[static_cast<size_t>(by) * cg.side + bx];
            if (code < 0 || code >= cb.size()) {
                throw DecodeError("dequantize_image: code " + std::to_string(code) + " out of range");
            }
            const auto& c = cb.centers[static_cast<size_t>(code)];
            for (int py = 0; py < kPoolGrid; ++py)
                for (int pxx = 0; pxx < kPoolGrid; ++pxx) {
                    const size_t base = (static_cast<size_t>(py) * kPoolGrid + pxx) * 3;
                    const auto to_u8 = [](double v) {
                        return static_cast<uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
                    };
                    const uint8_t r = to_u8(c[base]), g = to_u8(c[base + 1]), b = to_u8(c[base + 2]);
                    for (int dy = 0; dy < sub; ++dy)
                        for (int dx = 0; dx < sub; ++dx)
                            img.set(bx * kPatchPx + pxx * sub + dx, by * kPatchPx + py * sub + dy, r, g, b);
                }
        }
    }
    return img;
}

MaskedImage mask_middle(const ImageGrid& img, const Codebook& cb, double fraction) {
    if (img.width != img.height || img.width % kPatchPx != 0) {
        throw ShapeError("mask_middle: image must be square with side divisible by " +
                         std::to_string(kPatchPx));
    }
    if (!(fraction > 0.0 && fraction <= 1.0)) throw UsageError("mask_middle: fraction must be in (0,1]");
    const int cells = img.width / kPatchPx;
    const int region_cells = std::clamp(static_cast<int>(std::lround(fraction * cells)), 1, cells);
    const int offset_cells = (cells - region_cells) / 2;

    MaskedImage out;
    out.region_px = region_cells * kPatchPx;
    out.offset_px = offset_cells * kPatchPx;

    // Target codes come from the original central region.
    ImageGrid center = ImageGrid::filled(out.region_px, out.region_px, 0, 0, 0);
    for (int y = 0; y < out.region_px; ++y)
        for (int x = 0; x < out.region_px; ++x)
            for (int c = 0; c < 3; ++c)
                center.pixels[(static_cast<size_t>(y) * out.region_px + x) * 3 + static_cast<size_t>(c)] =
                    img.at(out.offset_px + x, out.offset_px + y, c);
    out.target = quantize_image(center, cb);

    out.corrupted = img;
    for (int y = 0; y < out.region_px; ++y)
        for (int x = 0; x < out.region_px; ++x)
            out.corrupted.set(out.offset_px + x, out.offset_px + y, 0, 0, 0);
    return out;
}

ImageGrid read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw DataError(path + ": not a binary PPM");
    auto next_int = [&f, &path]() {
        // Skip whitespace and '#' comment lines between header fields.
        int c = f.peek();
        while (c == '#' || std::isspace(c)) {
            if (c == '#') {
                std::string comment;
                std::getline(f, comment);
            } else {
                f.get();
            }
            c = f.peek();
        }
        int v = -1;
        f >> v;
        if (!f) throw DataError(path + ": truncated PPM header");
        return v;
    };
    const int w = next_int();
    const int h = next_int();
    const int maxval = next_int();
    if (maxval != 255) throw DataError(path + ": PPM maxval must be 255");
    f.get();  // single whitespace after header
    ImageGrid img;
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw DataError(path + ": truncated PPM payload");
    }
    return img;
}

void write_ppm(const ImageGrid& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw DataError("write failed: " + path);
}

}  // namespace ofa
