#include "mhnes/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace mhnes {

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes a little-endian host");

Tensor ImageSet::images(std::span<const std::size_t> index) const {
    const std::size_t per = image_numel();
    std::vector<double> out(index.size() * per);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= size()) throw std::out_of_range(fmt::format("image index {} out of {}", index[i], size()));
        std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(index[i] * per), per, out.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return Tensor::from({index.size(), channels, height, width}, std::move(out));
}

Tensor ImageSet::all_images() const { return Tensor::from({size(), channels, height, width}, pixels); }

std::vector<int> ImageSet::labels_at(std::span<const std::size_t> index) const {
    std::vector<int> out;
    out.reserve(index.size());
    for (std::size_t i : index) out.push_back(labels.at(i));
    return out;
}

ImageSet ImageSet::subset(std::span<const std::size_t> index) const {
    ImageSet out{channels, height, width, {}, labels_at(index)};
    auto t = images(index);
    out.pixels.assign(t.data().begin(), t.data().end());
    return out;
}

ImageSet ImageSet::with_pixels(std::vector<double> values) const {
    if (values.size() != pixels.size()) throw std::invalid_argument("with_pixels: size mismatch");
    ImageSet out = *this;
    out.pixels = std::move(values);
    return out;
}

void DatasetBundle::validate() const {
    if (num_classes < 2) throw std::invalid_argument("dataset needs at least 2 classes");
    for (const ImageSet* s : {&train, &val, &test}) {
        if (s->pixels.size() != s->size() * s->image_numel())
            throw std::invalid_argument("dataset split pixel count does not match its labels");
        for (int y : s->labels)
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
                throw std::invalid_argument(fmt::format("label {} out of range for {} classes", y, num_classes));
    }
}

std::vector<double> class_template(std::size_t cls, std::size_t classes, std::size_t size) {
    const double angle = std::numbers::pi * static_cast<double>(cls) / static_cast<double>(classes);
    const double freq = 1.5 + static_cast<double>(cls % 3) * 1.25;
    const double c = std::cos(angle), s = std::sin(angle);
    const double mid = (static_cast<double>(size) - 1.0) / 2.0;
    std::vector<double> out(size * size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double u = (static_cast<double>(x) - mid) / static_cast<double>(size);
            const double v = (static_cast<double>(y) - mid) / static_cast<double>(size);
            const double envelope = std::exp(-(u * u + v * v) / 0.18);
            out[y * size + x] = 0.5 + 0.4 * envelope * std::cos(2.0 * std::numbers::pi * freq * (u * c + v * s));
        }
    return out;
}

namespace {

ImageSet make_split(std::size_t classes, std::size_t n, std::size_t size, const std::vector<std::vector<double>>& templates,
                    Rng& rng) {
    ImageSet out{1, size, size, {}, {}};
    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.labels[i] = static_cast<int>(i % classes);
    std::shuffle(out.labels.begin(), out.labels.end(), rng);
    out.pixels.resize(n * size * size);
    std::normal_distribution<double> noise(0.0, 0.15);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& t = templates[static_cast<std::size_t>(out.labels[i])];
        for (std::size_t p = 0; p < t.size(); ++p)
            out.pixels[i * t.size() + p] = std::clamp(t[p] + noise(rng), 0.0, 1.0);
    }
    return out;
}

template <typename T>
void put(std::ofstream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

constexpr char kMagic[7] = {'M', 'H', 'N', 'E', 'S', '1', '\0'};

class Reader {
public:
    explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t n, const char* what) const {
        if (pos_ + n > bytes_.size())
            throw std::runtime_error(fmt::format("dataset truncated at byte offset {} reading {}: expected {} bytes, file has {}",
                                                 pos_, what, pos_ + n, bytes_.size()));
    }
    std::size_t pos() const { return pos_; }
    std::size_t size() const { return bytes_.size(); }

private:
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

DatasetBundle gen_synthetic(std::size_t classes, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                            std::size_t size, std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("gen_synthetic: classes must be at least 2");
    if (size < 8) throw std::invalid_argument("gen_synthetic: image size must be at least 8");
    std::vector<std::vector<double>> templates;
    for (std::size_t k = 0; k < classes; ++k) templates.push_back(class_template(k, classes, size));
    DatasetBundle out;
    out.num_classes = classes;
    Rng rng_train(derive_seed(seed, 1)), rng_val(derive_seed(seed, 2)), rng_test(derive_seed(seed, 3));
    out.train = make_split(classes, n_train, size, templates, rng_train);
    out.val = make_split(classes, n_val, size, templates, rng_val);
    out.test = make_split(classes, n_test, size, templates, rng_test);
    out.provenance = fmt::format("synthetic:seed={}", seed);
    return out;
}

std::string dataset_file(const std::string& path) {
    if (std::filesystem::is_directory(path)) return (std::filesystem::path(path) / "dataset.bin").string();
    return path;
}

void save_raw(const DatasetBundle& data, const std::string& path) {
    data.validate();
    std::ofstream out(dataset_file(path), std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write dataset to {}", path));
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(data.num_classes));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(data.train.height));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(data.train.width));
    for (const ImageSet* s : {&data.train, &data.val, &data.test}) put<std::uint32_t>(out, static_cast<std::uint32_t>(s->size()));
    for (const ImageSet* s : {&data.train, &data.val, &data.test})
        out.write(reinterpret_cast<const char*>(s->pixels.data()), static_cast<std::streamsize>(s->pixels.size() * sizeof(double)));
    for (const ImageSet* s : {&data.train, &data.val, &data.test})
        for (int y : s->labels) put<std::uint16_t>(out, static_cast<std::uint16_t>(y));
    if (!out) throw std::runtime_error(fmt::format("failed writing dataset to {}", path));
}

DatasetBundle load_raw(const std::string& path) {
    const std::string file = dataset_file(path);
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot open dataset {}", file));
    Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
    char magic[7];
    r.need(sizeof(magic), "magic");
    for (char& c : magic) c = r.get<char>("magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("dataset bad magic at byte offset 0");
    DatasetBundle out;
    out.num_classes = r.get<std::uint32_t>("class count");
    const std::size_t h = r.get<std::uint32_t>("height");
    const std::size_t w = r.get<std::uint32_t>("width");
    std::size_t counts[3];
    for (auto& n : counts) n = r.get<std::uint32_t>("split size");
    ImageSet* splits[3] = {&out.train, &out.val, &out.test};
    for (int s = 0; s < 3; ++s) {
        *splits[s] = ImageSet{1, h, w, {}, {}};
        const std::size_t n = counts[s] * h * w;
        r.need(n * sizeof(double), "images");
        splits[s]->pixels.resize(n);
        for (auto& v : splits[s]->pixels) v = r.get<double>("images");
    }
    for (int s = 0; s < 3; ++s) {
        splits[s]->labels.resize(counts[s]);
        for (std::size_t i = 0; i < counts[s]; ++i) {
            const std::size_t offset = r.pos();
            const auto y = r.get<std::uint16_t>("labels");
            if (y >= out.num_classes)
                throw std::runtime_error(fmt::format("label {} out of range for {} classes in record {} of split {} (byte offset {})",
                                                     y, out.num_classes, i, s, offset));
            splits[s]->labels[i] = y;
        }
    }
    if (r.pos() != r.size())
        throw std::runtime_error(fmt::format("dataset has {} trailing bytes after offset {}", r.size() - r.pos(), r.pos()));
    out.provenance = "file:" + file;
    return out;
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch) {
    if (batch == 0) throw std::invalid_argument("batch size must be positive");
    if (n == 0) return 0;
    return n < batch ? 1 : n / batch;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t steps = steps_per_epoch(n, batch);
    std::vector<std::vector<std::size_t>> out(steps);
    const std::size_t per = std::min(n, batch);
    for (std::size_t s = 0; s < steps; ++s)
        out[s].assign(order.begin() + static_cast<std::ptrdiff_t>(s * per), order.begin() + static_cast<std::ptrdiff_t>((s + 1) * per));
    return out;
}

std::pair<ImageSet, ImageSet> split_half(const ImageSet& data, std::uint64_t seed) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t half = data.size() / 2;
    std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half));
    std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(half), order.end());
    return {data.subset(a), data.subset(b)};
}

}  // namespace mhnes
