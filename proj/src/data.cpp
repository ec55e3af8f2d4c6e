#include "nes/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace nes {

Shape Dataset::sample_shape() const { return samples.empty() ? Shape{} : samples.front().shape(); }

void Dataset::validate() const
{
    if (samples.empty()) throw ConfigError("dataset is empty");
    if (labels.size() != samples.size()) throw ConfigError("dataset has " + std::to_string(samples.size()) +
                                                           " samples but " + std::to_string(labels.size()) + " labels");
    if (classes < 2) throw ConfigError("dataset needs at least two classes");
    const Shape s = sample_shape();
    if (s.size() != 3) throw DimensionError("samples must be (W,H,C) maps", s, Shape{0, 0, 0});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].shape() != s) throw DimensionError("sample shapes differ", samples[i].shape(), s);
        if (labels[i] >= classes) throw ConfigError("label out of range at sample " + std::to_string(i));
    }
}

DatasetKind dataset_kind_from_string(const std::string& name)
{
    if (name == "blobs2d") return DatasetKind::blobs2d;
    if (name == "waves1d") return DatasetKind::waves1d;
    throw ConfigError("unknown dataset kind '" + name + "'");
}

Dataset generate_dataset(DatasetKind kind, std::uint64_t seed, std::size_t n)
{
    Dataset d;
    d.classes = 2;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t label = i % 2;
        if (kind == DatasetKind::blobs2d) {
            Tensor x({8, 8, 3});
            const double cx = rng.uniform(1.5, 5.5), cy = rng.uniform(1.5, 5.5), amp = rng.uniform(0.8, 1.2);
            const double color[2][3] = {{1.0, 0.2, -1.0}, {-1.0, 0.2, 1.0}};
            for (std::size_t u = 0; u < 8; ++u)
                for (std::size_t v = 0; v < 8; ++v) {
                    const double du = static_cast<double>(u) - cx, dv = static_cast<double>(v) - cy;
                    const double bump = amp * std::exp(-(du * du + dv * dv) / (2.0 * 1.2 * 1.2));
                    for (std::size_t c = 0; c < 3; ++c) x.at({u, v, c}) = bump * color[label][c] + 0.2 * rng.normal();
                }
            d.samples.push_back(std::move(x));
        } else {
            Tensor x({32, 1, 1});
            const double amp = rng.uniform(0.7, 1.3), phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double f = label == 0 ? 2.0 : 5.0;
            for (std::size_t t = 0; t < 32; ++t)
                x[t] = amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t) / 32.0 + phase) +
                       0.2 * rng.normal();
            d.samples.push_back(std::move(x));
        }
        d.labels.push_back(label);
    }
    return d;
}

namespace {

std::size_t idx_type_width(std::uint8_t type, std::size_t offset)
{
    switch (type) {
    case 0x08:
    case 0x09: return 1;
    case 0x0B: return 2;
    case 0x0C:
    case 0x0D: return 4;
    case 0x0E: return 8;
    }
    throw ParseError("unknown IDX element type", offset);
}

std::uint64_t be(const std::vector<std::uint8_t>& b, std::size_t at, std::size_t width)
{
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v = (v << 8) | b[at + i];
    return v;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

IdxArray parse_idx(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() < 4) throw ParseError("truncated IDX magic", bytes.size());
    if (bytes[0] != 0 || bytes[1] != 0) throw ParseError("bad IDX magic", 0);
    IdxArray a;
    a.type = bytes[2];
    const std::size_t width = idx_type_width(a.type, 2);
    const std::size_t rank = bytes[3];
    if (rank == 0) throw ParseError("IDX rank must be >= 1", 3);
    if (bytes.size() < 4 + 4 * rank) throw ParseError("truncated IDX dimensions", bytes.size());
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        a.dims.push_back(static_cast<std::size_t>(be(bytes, 4 + 4 * i, 4)));
        count *= a.dims.back();
    }
    const std::size_t start = 4 + 4 * rank;
    if (bytes.size() - start != count * width)
        throw ParseError("IDX payload holds " + std::to_string(bytes.size() - start) + " bytes, expected " +
                             std::to_string(count * width),
                         std::min(bytes.size(), start + count * width));
    a.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t raw = be(bytes, start + i * width, width);
        switch (a.type) {
        case 0x08: a.values[i] = static_cast<double>(raw) / 255.0; break;
        case 0x09: a.values[i] = static_cast<std::int8_t>(raw); break;
        case 0x0B: a.values[i] = static_cast<std::int16_t>(raw); break;
        case 0x0C: a.values[i] = static_cast<std::int32_t>(raw); break;
        case 0x0D: a.values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(raw)); break;
        case 0x0E: a.values[i] = std::bit_cast<double>(raw); break;
        }
    }
    return a;
}

IdxArray read_idx(const std::filesystem::path& path) { return parse_idx(slurp(path)); }

std::vector<std::uint8_t> encode_idx_u8(const Shape& dims, const std::vector<std::uint8_t>& data)
{
    if (dims.empty() || dims.size() > 255) throw ConfigError("IDX rank must be in [1, 255]");
    if (element_count(dims) != data.size()) throw DimensionError("IDX data size", Shape{data.size()}, dims);
    std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(dims.size())};
    for (std::size_t d : dims)
        for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(d >> s));
    out.insert(out.end(), data.begin(), data.end());
    return out;
}

void write_idx_u8(const std::filesystem::path& path, const Shape& dims, const std::vector<std::uint8_t>& data)
{
    const auto bytes = encode_idx_u8(dims, data);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset ingest_idx(const std::filesystem::path& images, const std::filesystem::path& labels)
{
    const IdxArray im = read_idx(images);
    const IdxArray lb = read_idx(labels);
    if (im.dims.size() != 3 && im.dims.size() != 4) throw ConfigError("IDX images must be 3-D or 4-D");
    if (lb.dims.size() != 1 || lb.type != 0x08) throw ConfigError("IDX labels must be a 1-D u8 array");
    if (lb.dims[0] != im.dims[0]) throw ConfigError("image and label counts differ");
    const Shape s{im.dims[1], im.dims[2], im.dims.size() == 4 ? im.dims[3] : 1};
    const std::size_t per = element_count(s);
    Dataset d;
    for (std::size_t i = 0; i < im.dims[0]; ++i) {
        d.samples.emplace_back(s, std::vector<double>(im.values.begin() + static_cast<std::ptrdiff_t>(i * per),
                                                      im.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
        const auto label = static_cast<std::size_t>(std::llround(lb.values[i] * 255.0));
        d.labels.push_back(label);
        d.classes = std::max(d.classes, label + 1);
    }
    d.classes = std::max<std::size_t>(d.classes, 2);
    return d;
}

double linear_probe_accuracy(const Dataset& data, std::size_t steps, double lr)
{
    data.validate();
    const std::size_t n = data.size(), k = data.classes, dim = data.samples.front().size();
    std::vector<double> w((dim + 1) * k, 0.0);
    std::vector<double> p(k);
    auto scores = [&](std::size_t i) {
        const Tensor& x = data.samples[i];
        double mx = -1e300;
        for (std::size_t c = 0; c < k; ++c) {
            double z = w[dim * k + c];
            for (std::size_t j = 0; j < dim; ++j) z += x[j] * w[j * k + c];
            p[c] = z;
            mx = std::max(mx, z);
        }
        double s = 0.0;
        for (auto& v : p) s += (v = std::exp(v - mx));
        for (auto& v : p) v /= s;
    };
    for (std::size_t it = 0; it < steps; ++it) {
        std::vector<double> g(w.size(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            scores(i);
            p[data.labels[i]] -= 1.0;
            const Tensor& x = data.samples[i];
            for (std::size_t c = 0; c < k; ++c) {
                for (std::size_t j = 0; j < dim; ++j) g[j * k + c] += x[j] * p[c];
                g[dim * k + c] += p[c];
            }
        }
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j] / static_cast<double>(n);
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i) {
        scores(i);
        hit += static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == data.labels[i];
    }
    return static_cast<double>(hit) / static_cast<double>(n);
}

} // namespace nes
