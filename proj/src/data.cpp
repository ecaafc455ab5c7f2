#include "dcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "dcl/image_io.hpp"
#include "json.hpp"

namespace dcl {

namespace {

void check_image(const char* who, const Tensor& image) {
    if (!image.valid() || image.shape().size() != 3) {
        throw std::invalid_argument(std::string(who) +
                                    ": expected a rank-3 [H x W x C] image");
    }
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

double luminance(double r, double g, double b) {
    return 0.299 * r + 0.587 * g + 0.114 * b;
}

}  // namespace

const std::array<Prototype, 8>& shape_vocabulary() {
    static const std::array<Prototype, 8> vocab = {{
        {ShapeKind::circle, 0.90, 0.15, 0.15},    // red
        {ShapeKind::square, 0.15, 0.80, 0.20},    // green
        {ShapeKind::triangle, 0.20, 0.30, 0.90},  // blue
        {ShapeKind::circle, 0.95, 0.85, 0.10},    // yellow
        {ShapeKind::square, 0.85, 0.20, 0.80},    // magenta
        {ShapeKind::triangle, 0.10, 0.80, 0.85},  // cyan
        {ShapeKind::circle, 0.95, 0.55, 0.10},    // orange
        {ShapeKind::square, 0.50, 0.20, 0.75},    // violet
    }};
    return vocab;
}

void SyntheticSpec::validate() const {
    if (num_images == 0) throw std::invalid_argument("synthetic spec: num_images must be positive");
    if (image_size < 16 || image_size % 2 != 0) {
        throw std::invalid_argument("synthetic spec: image_size must be even and at least 16");
    }
    if (num_classes == 0 || num_classes > shape_vocabulary().size()) {
        throw std::invalid_argument("synthetic spec: num_classes must be in [1, " +
                                    std::to_string(shape_vocabulary().size()) + "]");
    }
    if (min_objects == 0 || min_objects > max_objects) {
        throw std::invalid_argument("synthetic spec: need 1 <= min_objects <= max_objects");
    }
    if (max_objects > 4) {
        throw std::invalid_argument("synthetic spec: at most 4 objects per image (one per quadrant)");
    }
    if (min_objects > num_classes) {
        throw std::invalid_argument("synthetic spec: min_objects exceeds num_classes");
    }
}

Dataset generate_dataset(const SyntheticSpec& spec) {
    spec.validate();
    const size_t s = spec.image_size;
    const size_t half = s / 2;
    Rng rng(spec.rng_seed);

    Dataset out;
    out.spec = spec;
    out.images = zeros({spec.num_images, s, s, 3});
    out.targets.labels = zeros({spec.num_images, spec.num_classes});

    const auto& vocab = shape_vocabulary();
    std::vector<size_t> classes(spec.num_classes);
    std::vector<size_t> quadrants = {0, 1, 2, 3};

    for (size_t n = 0; n < spec.num_images; ++n) {
        const size_t img_base = n * s * s * 3;

        // textured background: per-pixel gray noise around a per-image level
        const double level = rng.uniform(0.08, 0.22);
        for (size_t p = 0; p < s * s; ++p) {
            const double v = clamp01(level + rng.uniform(-0.05, 0.05));
            out.images[img_base + p * 3 + 0] = v;
            out.images[img_base + p * 3 + 1] = v;
            out.images[img_base + p * 3 + 2] = v;
        }

        const size_t max_here = std::min(spec.max_objects, spec.num_classes);
        const size_t count = spec.min_objects + rng.index(max_here - spec.min_objects + 1);

        // distinct classes and distinct quadrants via partial Fisher-Yates
        for (size_t i = 0; i < classes.size(); ++i) classes[i] = i;
        for (size_t i = 0; i < count; ++i) std::swap(classes[i], classes[i + rng.index(classes.size() - i)]);
        for (size_t i = 0; i < 4; ++i) quadrants[i] = i;
        for (size_t i = 0; i < count; ++i) std::swap(quadrants[i], quadrants[i + rng.index(4 - i)]);

        for (size_t i = 0; i < count; ++i) {
            const size_t cls = classes[i];
            const size_t oy = (quadrants[i] / 2) * half;
            const size_t ox = (quadrants[i] % 2) * half;
            const long rmin = 2, rmax = static_cast<long>(half / 2 - 1);
            const long r = rmin + static_cast<long>(rng.index(static_cast<size_t>(rmax - rmin + 1)));
            const long lo_y = static_cast<long>(oy) + r, hi_y = static_cast<long>(oy + half) - 1 - r;
            const long lo_x = static_cast<long>(ox) + r, hi_x = static_cast<long>(ox + half) - 1 - r;
            const long cy = lo_y + static_cast<long>(rng.index(static_cast<size_t>(hi_y - lo_y + 1)));
            const long cx = lo_x + static_cast<long>(rng.index(static_cast<size_t>(hi_x - lo_x + 1)));

            // paint directly into the dataset tensor at this image's offset
            const auto& proto = vocab[cls];
            for (long ii = cy - r; ii <= cy + r; ++ii) {
                for (long jj = cx - r; jj <= cx + r; ++jj) {
                    bool inside = false;
                    switch (proto.shape) {
                        case ShapeKind::circle:
                            inside = (ii - cy) * (ii - cy) + (jj - cx) * (jj - cx) <= r * r;
                            break;
                        case ShapeKind::square:
                            inside = true;
                            break;
                        case ShapeKind::triangle: {
                            const long drop = ii - (cy - r);
                            inside = 2 * std::labs(jj - cx) <= drop;
                            break;
                        }
                    }
                    if (!inside) continue;
                    const size_t px = img_base + (static_cast<size_t>(ii) * s + static_cast<size_t>(jj)) * 3;
                    out.images[px + 0] = proto.r;
                    out.images[px + 1] = proto.g;
                    out.images[px + 2] = proto.b;
                }
            }
            out.targets.labels(n, cls) = 1.0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// image utilities
// ---------------------------------------------------------------------------

Tensor resize_bilinear(const Tensor& image, size_t out_h, size_t out_w) {
    check_image("resize_bilinear", image);
    if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize_bilinear: empty output");
    const size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    Tensor out = zeros({out_h, out_w, c});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (size_t i = 0; i < out_h; ++i) {
        const double src_y = (static_cast<double>(i) + 0.5) * sy - 0.5;
        const double fy = std::floor(src_y);
        const double wy = src_y - fy;
        const long y0 = std::max(0L, std::min(static_cast<long>(h) - 1, static_cast<long>(fy)));
        const long y1 = std::max(0L, std::min(static_cast<long>(h) - 1, static_cast<long>(fy) + 1));
        for (size_t j = 0; j < out_w; ++j) {
            const double src_x = (static_cast<double>(j) + 0.5) * sx - 0.5;
            const double fx = std::floor(src_x);
            const double wx = src_x - fx;
            const long x0 = std::max(0L, std::min(static_cast<long>(w) - 1, static_cast<long>(fx)));
            const long x1 = std::max(0L, std::min(static_cast<long>(w) - 1, static_cast<long>(fx) + 1));
            for (size_t k = 0; k < c; ++k) {
                const double a = image[(static_cast<size_t>(y0) * w + static_cast<size_t>(x0)) * c + k];
                const double b = image[(static_cast<size_t>(y0) * w + static_cast<size_t>(x1)) * c + k];
                const double d = image[(static_cast<size_t>(y1) * w + static_cast<size_t>(x0)) * c + k];
                const double e = image[(static_cast<size_t>(y1) * w + static_cast<size_t>(x1)) * c + k];
                const double top = a * (1.0 - wx) + b * wx;
                const double bot = d * (1.0 - wx) + e * wx;
                out[(i * out_w + j) * c + k] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
    check_image("gaussian_blur", image);
    if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_blur: sigma must be positive");
    const size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    const long radius = std::max(1L, static_cast<long>(std::ceil(2.0 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double total = 0.0;
    for (long t = -radius; t <= radius; ++t) {
        const double v = std::exp(-0.5 * (t * t) / (sigma * sigma));
        kernel[static_cast<size_t>(t + radius)] = v;
        total += v;
    }
    for (double& v : kernel) v /= total;

    auto clampi = [](long v, long n) { return std::max(0L, std::min(n - 1, v)); };
    Tensor tmp = zeros({h, w, c});
    for (size_t i = 0; i < h; ++i) {  // horizontal pass
        for (size_t j = 0; j < w; ++j) {
            for (size_t k = 0; k < c; ++k) {
                double acc = 0.0;
                for (long t = -radius; t <= radius; ++t) {
                    const size_t jj = static_cast<size_t>(clampi(static_cast<long>(j) + t, static_cast<long>(w)));
                    acc += kernel[static_cast<size_t>(t + radius)] * image[(i * w + jj) * c + k];
                }
                tmp[(i * w + j) * c + k] = acc;
            }
        }
    }
    Tensor out = zeros({h, w, c});
    for (size_t i = 0; i < h; ++i) {  // vertical pass
        for (size_t j = 0; j < w; ++j) {
            for (size_t k = 0; k < c; ++k) {
                double acc = 0.0;
                for (long t = -radius; t <= radius; ++t) {
                    const size_t ii = static_cast<size_t>(clampi(static_cast<long>(i) + t, static_cast<long>(h)));
                    acc += kernel[static_cast<size_t>(t + radius)] * tmp[(ii * w + j) * c + k];
                }
                out[(i * w + j) * c + k] = acc;
            }
        }
    }
    return out;
}

Tensor flip_horizontal(const Tensor& image) {
    check_image("flip_horizontal", image);
    const size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    Tensor out = zeros({h, w, c});
    for (size_t i = 0; i < h; ++i) {
        for (size_t j = 0; j < w; ++j) {
            for (size_t k = 0; k < c; ++k) {
                out[(i * w + j) * c + k] = image[(i * w + (w - 1 - j)) * c + k];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

void AugmentParams::validate() const {
    if (!(crop_scale_min > 0.0) || crop_scale_min > crop_scale_max || crop_scale_max > 1.0) {
        throw std::invalid_argument("augment params: need 0 < crop_scale_min <= crop_scale_max <= 1");
    }
    if (flip_prob < 0.0 || flip_prob > 1.0) throw std::invalid_argument("augment params: flip_prob outside [0, 1]");
    if (jitter_strength < 0.0 || jitter_strength >= 1.0) {
        throw std::invalid_argument("augment params: jitter_strength outside [0, 1)");
    }
    if (blur_prob < 0.0 || blur_prob > 1.0) throw std::invalid_argument("augment params: blur_prob outside [0, 1]");
    if (!(blur_sigma_min > 0.0) || blur_sigma_min > blur_sigma_max) {
        throw std::invalid_argument("augment params: need 0 < blur_sigma_min <= blur_sigma_max");
    }
}

Tensor augment_view(const Tensor& image, const AugmentParams& params, Rng& rng) {
    check_image("augment_view", image);
    params.validate();
    const size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (h != w) throw std::invalid_argument("augment_view: expected a square image");
    if (c != 3) throw std::invalid_argument("augment_view: expected 3 channels");
    const size_t s = h;

    // Fixed draw order regardless of outcomes, so view streams are stable:
    // crop area, crop offsets, flip coin, three jitter factors, blur coin,
    // blur sigma.
    const double area = rng.uniform(params.crop_scale_min, params.crop_scale_max);
    size_t side = static_cast<size_t>(std::llround(std::sqrt(area) * static_cast<double>(s)));
    side = std::max<size_t>(1, std::min(s, side));
    const size_t y0 = rng.index(s - side + 1);
    const size_t x0 = rng.index(s - side + 1);
    const bool do_flip = rng.bernoulli(params.flip_prob);
    const double j = params.jitter_strength;
    const double f_bright = rng.uniform(1.0 - j, 1.0 + j);
    const double f_contrast = rng.uniform(1.0 - j, 1.0 + j);
    const double f_sat = rng.uniform(1.0 - j, 1.0 + j);
    const bool do_blur = rng.bernoulli(params.blur_prob);
    const double sigma = rng.uniform(params.blur_sigma_min, params.blur_sigma_max);

    // crop + resize back to s
    Tensor view;
    if (side == s && y0 == 0 && x0 == 0) {
        view = zeros({s, s, 3});
        for (size_t i = 0; i < image.size(); ++i) view[i] = image[i];
    } else {
        Tensor crop = zeros({side, side, 3});
        for (size_t i = 0; i < side; ++i) {
            for (size_t jj = 0; jj < side; ++jj) {
                for (size_t k = 0; k < 3; ++k) {
                    crop[(i * side + jj) * 3 + k] = image[((i + y0) * s + (jj + x0)) * 3 + k];
                }
            }
        }
        view = resize_bilinear(crop, s, s);
    }

    if (do_flip) view = flip_horizontal(view);

    if (f_bright != 1.0) {
        for (size_t i = 0; i < view.size(); ++i) view[i] = clamp01(view[i] * f_bright);
    }
    if (f_contrast != 1.0) {
        double mean_gray = 0.0;
        for (size_t p = 0; p < s * s; ++p) {
            mean_gray += luminance(view[p * 3], view[p * 3 + 1], view[p * 3 + 2]);
        }
        mean_gray /= static_cast<double>(s * s);
        for (size_t i = 0; i < view.size(); ++i) {
            view[i] = clamp01(mean_gray + (view[i] - mean_gray) * f_contrast);
        }
    }
    if (f_sat != 1.0) {
        for (size_t p = 0; p < s * s; ++p) {
            const double gray = luminance(view[p * 3], view[p * 3 + 1], view[p * 3 + 2]);
            for (size_t k = 0; k < 3; ++k) {
                view[p * 3 + k] = clamp01(gray + (view[p * 3 + k] - gray) * f_sat);
            }
        }
    }

    if (do_blur) view = gaussian_blur(view, sigma);

    for (size_t i = 0; i < view.size(); ++i) view[i] = clamp01(view[i]);
    return view;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

Tensor Batch::interleaved() const {
    const size_t b = view_a.dim(0), s = view_a.dim(1), c = view_a.dim(3);
    Tensor out = zeros({2 * b, s, s, c});
    const size_t stride = s * s * c;
    for (size_t i = 0; i < b; ++i) {
        for (size_t t = 0; t < stride; ++t) {
            out[(2 * i) * stride + t] = view_a[i * stride + t];
            out[(2 * i + 1) * stride + t] = view_b[i * stride + t];
        }
    }
    return out;
}

Batch make_batch(const Tensor& images, size_t batch_size,
                 const AugmentParams& params, Rng& rng) {
    if (!images.valid() || images.shape().size() != 4) {
        throw std::invalid_argument("make_batch: expected rank-4 [N x S x S x C] images");
    }
    const size_t n = images.dim(0), s = images.dim(1), c = images.dim(3);
    if (batch_size == 0 || batch_size > n) {
        throw std::invalid_argument("make_batch: batch size " + std::to_string(batch_size) +
                                    " outside [1, " + std::to_string(n) + "]");
    }

    // sample without replacement (partial Fisher-Yates)
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    for (size_t i = 0; i < batch_size; ++i) std::swap(order[i], order[i + rng.index(n - i)]);

    Batch batch;
    batch.view_a = zeros({batch_size, s, s, c});
    batch.view_b = zeros({batch_size, s, s, c});
    batch.image_indices.assign(order.begin(), order.begin() + static_cast<long>(batch_size));

    const size_t stride = s * s * c;
    Tensor one = zeros({s, s, c});
    for (size_t i = 0; i < batch_size; ++i) {
        const size_t src = batch.image_indices[i] * stride;
        for (size_t t = 0; t < stride; ++t) one[t] = images[src + t];
        Tensor a = augment_view(one, params, rng);
        Tensor b = augment_view(one, params, rng);
        for (size_t t = 0; t < stride; ++t) {
            batch.view_a[i * stride + t] = a[t];
            batch.view_b[i * stride + t] = b[t];
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// dataset cache file
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'C', 'L', 'S', 'E', 'T', '0', '1'};

void write_doubles(std::ofstream& f, const Tensor& t) {
    for (size_t i = 0; i < t.size(); ++i) {
        const double v = t[i];
        char buf[sizeof(double)];
        std::memcpy(buf, &v, sizeof(double));
        f.write(buf, sizeof(double));
    }
}

void read_doubles(std::ifstream& f, Tensor& t, const std::string& path) {
    for (size_t i = 0; i < t.size(); ++i) {
        char buf[sizeof(double)];
        if (!f.read(buf, sizeof(double))) {
            throw std::runtime_error("dataset file truncated: " + path);
        }
        double v;
        std::memcpy(&v, buf, sizeof(double));
        t[i] = v;
    }
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& dataset) {
    if (!dataset.images.valid() || !dataset.targets.labels.valid()) {
        throw std::invalid_argument("save_dataset: dataset has no images or labels");
    }
    nlohmann::json header = {
        {"version", 1},
        {"num_images", dataset.spec.num_images},
        {"image_size", dataset.spec.image_size},
        {"num_classes", dataset.spec.num_classes},
        {"min_objects", dataset.spec.min_objects},
        {"max_objects", dataset.spec.max_objects},
        {"rng_seed", dataset.spec.rng_seed},
        {"payload", "f64"},
    };
    const std::string text = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(kMagic, sizeof(kMagic));
    const uint32_t len = static_cast<uint32_t>(text.size());
    char lenbuf[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                      static_cast<char>((len >> 16) & 0xff), static_cast<char>((len >> 24) & 0xff)};
    f.write(lenbuf, 4);
    f.write(text.data(), static_cast<long>(text.size()));
    write_doubles(f, dataset.images);
    write_doubles(f, dataset.targets.labels);
    if (!f) throw std::runtime_error("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);

    char magic[sizeof(kMagic)];
    if (!f.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("not a dataset file (bad magic): " + path);
    }
    char lenbuf[4];
    if (!f.read(lenbuf, 4)) throw std::runtime_error("dataset file truncated: " + path);
    const uint32_t len = static_cast<uint32_t>(static_cast<unsigned char>(lenbuf[0])) |
                         (static_cast<uint32_t>(static_cast<unsigned char>(lenbuf[1])) << 8) |
                         (static_cast<uint32_t>(static_cast<unsigned char>(lenbuf[2])) << 16) |
                         (static_cast<uint32_t>(static_cast<unsigned char>(lenbuf[3])) << 24);
    std::string text(len, '\0');
    if (!f.read(text.data(), static_cast<long>(len))) {
        throw std::runtime_error("dataset file truncated: " + path);
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("bad dataset header in " + path + ": " + e.what());
    }
    if (header.value("version", 0) != 1) {
        throw std::runtime_error("unsupported dataset version in " + path);
    }
    if (header.value("payload", "") != "f64") {
        throw std::runtime_error("unsupported dataset payload in " + path);
    }

    Dataset out;
    out.spec.num_images = header.at("num_images").get<size_t>();
    out.spec.image_size = header.at("image_size").get<size_t>();
    out.spec.num_classes = header.at("num_classes").get<size_t>();
    out.spec.min_objects = header.at("min_objects").get<size_t>();
    out.spec.max_objects = header.at("max_objects").get<size_t>();
    out.spec.rng_seed = header.at("rng_seed").get<uint64_t>();
    out.spec.validate();

    const size_t s = out.spec.image_size;
    out.images = zeros({out.spec.num_images, s, s, 3});
    out.targets.labels = zeros({out.spec.num_images, out.spec.num_classes});
    read_doubles(f, out.images, path);
    read_doubles(f, out.targets.labels, path);
    return out;
}

Dataset load_png_directory(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") {
            names.push_back(entry.path().string());
        }
    }
    if (names.empty()) throw std::runtime_error("no .png files in " + dir);
    std::sort(names.begin(), names.end());

    Dataset out;
    size_t s = 0;
    for (size_t n = 0; n < names.size(); ++n) {
        Tensor img = read_png(names[n]);
        const size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
        if (h != w) throw std::runtime_error("image is not square: " + names[n]);
        if (n == 0) {
            s = h;
            out.images = zeros({names.size(), s, s, 3});
        } else if (h != s) {
            throw std::runtime_error("image size mismatch: " + names[n]);
        }
        const size_t base = n * s * s * 3;
        for (size_t p = 0; p < s * s; ++p) {
            for (size_t k = 0; k < 3; ++k) {
                out.images[base + p * 3 + k] = img[p * c + (c == 1 ? 0 : k)];
            }
        }
    }
    out.spec.num_images = names.size();
    out.spec.image_size = s;
    return out;
}

}  // namespace dcl
