#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ofa/error.hpp"
#include "ofa/rng.hpp"
#include "ofa/vocab.hpp"

namespace ofa {

constexpr int kPatchPx = 16;
// Each 16x16 RGB block is mean-pooled to a 4x4 grid before codebook lookup.
constexpr int kPoolGrid = 4;
constexpr int kBlockDim = kPoolGrid * kPoolGrid * 3;

// Normalized corner coordinates, fractions of image width/height.
struct BBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    void validate() const;
    double area() const { return (x2 - x1) * (y2 - y1); }
};

// 8-bit RGB image, row-major.
struct ImageGrid {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;  // width*height*3

    static ImageGrid filled(int width, int height, uint8_t r, uint8_t g, uint8_t b);
    uint8_t at(int x, int y, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + static_cast<size_t>(c)];
    }
    void set(int x, int y, uint8_t r, uint8_t g, uint8_t b);
    bool operator==(const ImageGrid&) const = default;
};

// Discrete code indices (< codebook size) for a square grid of image blocks.
struct CodeGrid {
    int side = 0;
    std::vector<int> codes;  // side*side, row-major
    bool operator==(const CodeGrid&) const = default;
};

// bin(c) = min(floor(c * num_bins), num_bins - 1), emitted x1,y1,x2,y2.
std::array<int, 4> box_to_bins(const BBox& b, int num_bins);
// Bin-center convention: coordinate = (bin + 0.5) / num_bins.
BBox bins_to_box(const std::array<int, 4>& bins, int num_bins);

// Same, at the unified-vocab id level (kind-checked).
std::array<int, 4> box_to_tokens(const BBox& b, const UnifiedVocab& v);
BBox tokens_to_box(std::span<const int> ids, const UnifiedVocab& v);

// K pooled-block centroids learned by seeded k-means; the discrete-code
// training interface of a neural image tokenizer at toy scale.
struct Codebook {
    std::vector<std::vector<double>> centers;  // k x kBlockDim, values in [0,1]

    int size() const { return static_cast<int>(centers.size()); }
    static Codebook train(const std::vector<const ImageGrid*>& images, int k, uint64_t seed,
                          int iterations = 25);
    void save(const std::string& path) const;
    static Codebook load(const std::string& path);
    // Nearest center by L2; ties resolved to the lowest code id.
    int nearest(const std::vector<double>& block) const;
};

// Mean-pool the 16x16 block at pixel origin (x0, y0) to kBlockDim values in [0,1].
std::vector<double> pool_block(const ImageGrid& img, int x0, int y0);

CodeGrid quantize_image(const ImageGrid& img, const Codebook& cb);
ImageGrid dequantize_image(const CodeGrid& cg, const Codebook& cb);

// Zero the central square region (fraction of each side, block-aligned) and
// return the code grid of the ORIGINAL central region as the target.
struct MaskedImage {
    ImageGrid corrupted;
    CodeGrid target;
    int region_px = 0;   // masked square side in pixels
    int offset_px = 0;   // top-left corner of the region
};
MaskedImage mask_middle(const ImageGrid& img, const Codebook& cb, double fraction = 0.5);

// Binary PPM (P6, maxval 255).
ImageGrid read_ppm(const std::string& path);
void write_ppm(const ImageGrid& img, const std::string& path);

}  // namespace ofa
