#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mhnes/rng.hpp"
#include "mhnes/tensor.hpp"

namespace mhnes {

/// Grayscale images [N, channels, height, width] with integer labels.
struct ImageSet {
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t image_numel() const { return channels * height * width; }
    Tensor images(std::span<const std::size_t> index) const;
    Tensor all_images() const;
    std::vector<int> labels_at(std::span<const std::size_t> index) const;
    ImageSet subset(std::span<const std::size_t> index) const;
    /// Same labels, pixels replaced.
    ImageSet with_pixels(std::vector<double> values) const;

    bool operator==(const ImageSet&) const = default;
};

struct DatasetBundle {
    std::size_t num_classes = 0;
    ImageSet train, val, test;
    std::string provenance;

    void validate() const;
    bool operator==(const DatasetBundle& o) const {
        return num_classes == o.num_classes && train == o.train && val == o.val && test == o.test;
    }
};

/// Oriented stripe templates, one per class, plus N(0, 0.15) pixel noise,
/// clipped to [0, 1]. Each split holds n / C (+1 for the first n % C classes)
/// examples per class in shuffled order.
DatasetBundle gen_synthetic(std::size_t classes, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                            std::size_t size, std::uint64_t seed);

/// Noise-free class template used by gen_synthetic, [size * size].
std::vector<double> class_template(std::size_t cls, std::size_t classes, std::size_t size);

/// Binary bundle: "MHNES1\0", u32 C, H, W, n_train, n_val, n_test, float64
/// images per split, u16 labels per split, little endian.
void save_raw(const DatasetBundle& data, const std::string& path);
/// `path` may name the file or a directory holding dataset.bin.
DatasetBundle load_raw(const std::string& path);
std::string dataset_file(const std::string& path);

/// Mini-batches of one epoch over a fresh permutation. Trailing examples that
/// do not fill a batch are dropped unless n < batch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng);
std::size_t steps_per_epoch(std::size_t n, std::size_t batch);

/// Seeded 50/50 split of a training set into search-train and search-val.
std::pair<ImageSet, ImageSet> split_half(const ImageSet& data, std::uint64_t seed);

}  // namespace mhnes
