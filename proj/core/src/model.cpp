#include "tlab/model.hpp"

#include <cmath>
#include <cstring>

#include "tlab/error.hpp"
#include "tlab/io.hpp"
#include "tlab/rng.hpp"

namespace tlab {

std::string_view arch_name(Arch arch) {
  switch (arch) {
    case Arch::MlpS: return "mlp_s";
    case Arch::MlpL: return "mlp_l";
    case Arch::CnnS: return "cnn_s";
    case Arch::CnnL: return "cnn_l";
  }
  throw ValidationError("unknown arch id " + std::to_string(static_cast<int>(arch)));
}

Arch parse_arch(std::string_view name) {
  for (Arch a : {Arch::MlpS, Arch::MlpL, Arch::CnnS, Arch::CnnL})
    if (arch_name(a) == name) return a;
  throw ValidationError("unknown arch '" + std::string(name) + "'");
}

namespace {

using K = LayerSpec::Kind;

LayerSpec dense(std::string name, std::size_t in, std::size_t out) { return {K::Dense, std::move(name), in, out, 0}; }
LayerSpec conv(std::string name, std::size_t in, std::size_t out) { return {K::Conv, std::move(name), in, out, 3}; }
LayerSpec relu_layer() { return {K::Relu, "", 0, 0, 0}; }
LayerSpec flatten() { return {K::Flatten, "", 0, 0, 0}; }

bool is_conv_arch(Arch arch) { return arch == Arch::CnnS || arch == Arch::CnnL; }

}  // namespace

const std::vector<LayerSpec>& layers(Arch arch) {
  static const std::vector<LayerSpec> mlp_s = {flatten(), dense("fc1", 256, 64), relu_layer(), dense("fc2", 64, 10)};
  static const std::vector<LayerSpec> mlp_l = {flatten(),           dense("fc1", 256, 128), relu_layer(),
                                               dense("fc2", 128, 64), relu_layer(),          dense("fc3", 64, 10)};
  static const std::vector<LayerSpec> cnn_s = {conv("conv1", 1, 8), relu_layer(),          conv("conv2", 8, 8),
                                               relu_layer(),        flatten(),             dense("fc1", 2048, 16),
                                               relu_layer(),        dense("fc2", 16, 10)};
  static const std::vector<LayerSpec> cnn_l = {conv("conv1", 1, 16), relu_layer(),          conv("conv2", 16, 16),
                                               relu_layer(),         flatten(),             dense("fc1", 4096, 64),
                                               relu_layer(),         dense("fc2", 64, 10)};
  switch (arch) {
    case Arch::MlpS: return mlp_s;
    case Arch::MlpL: return mlp_l;
    case Arch::CnnS: return cnn_s;
    case Arch::CnnL: return cnn_l;
  }
  throw ValidationError("unknown arch id " + std::to_string(static_cast<int>(arch)));
}

std::vector<std::pair<std::string, Shape>> parameter_layout(Arch arch) {
  std::vector<std::pair<std::string, Shape>> out;
  for (const auto& l : layers(arch)) {
    if (l.kind == K::Dense) {
      out.emplace_back(l.name + ".weight", Shape{l.in, l.out});
      out.emplace_back(l.name + ".bias", Shape{l.out});
    } else if (l.kind == K::Conv) {
      out.emplace_back(l.name + ".weight", Shape{l.out, l.in, l.kernel, l.kernel});
      out.emplace_back(l.name + ".bias", Shape{l.out});
    }
  }
  return out;
}

std::size_t parameter_count(Arch arch) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_layout(arch)) n += numel(shape);
  return n;
}

std::size_t ParamSet::total_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

const Tensor& ParamSet::at(std::string_view name) const {
  for (const auto& p : params)
    if (p.name == name) return p.tensor;
  throw ValidationError("no parameter named '" + std::string(name) + "'");
}

std::uint64_t ParamSet::checksum() const {
  std::uint64_t h = static_cast<std::uint64_t>(arch) + 0x51ed270b27e2a5a3ULL;
  for (const auto& p : params) {
    for (char c : p.name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    h = (h ^ tlab::checksum(p.tensor)) * 1099511628211ULL;
  }
  return h;
}

ParamSet init(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.input_shape != Shape{1, kImageSide, kImageSide} || spec.num_classes != kNumClasses)
    throw ValidationError("desk models take (1,16,16) inputs and 10 classes");
  ParamSet ps;
  ps.arch = spec.arch;
  std::uint64_t index = 0;
  for (const auto& l : layers(spec.arch)) {
    if (l.kind != K::Dense && l.kind != K::Conv) continue;
    const std::size_t fan_in = l.kind == K::Dense ? l.in : l.in * l.kernel * l.kernel;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Shape ws = l.kind == K::Dense ? Shape{l.in, l.out} : Shape{l.out, l.in, l.kernel, l.kernel};
    Tensor w(ws);
    Rng rng = Rng::substream(seed, stream::kInit, index++);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
    ps.params.push_back({l.name + ".weight", std::move(w)});
    ps.params.push_back({l.name + ".bias", Tensor(Shape{l.out})});
  }
  return ps;
}

ParamSet zeros_like(Arch arch) {
  ParamSet ps;
  ps.arch = arch;
  for (auto& [name, shape] : parameter_layout(arch)) ps.params.push_back({name, Tensor(shape)});
  return ps;
}

std::vector<Var> bind(Tape& tape, const ParamSet& params, bool requires_grad) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const auto& p : params.params) out.push_back(tape.leaf(p.tensor, requires_grad));
  return out;
}

Var forward(Arch arch, std::span<const Var> params, Var x) {
  const Shape& xs = x.shape();
  if (is_conv_arch(arch)) {
    if (xs.size() != 4 || xs[1] != 1 || xs[2] != kImageSide || xs[3] != kImageSide)
      throw DimensionError(std::string(arch_name(arch)) + " expects (N,1,16,16), got " + shape_str(xs));
  } else {
    const bool image = xs.size() == 4 && xs[1] == 1 && xs[2] == kImageSide && xs[3] == kImageSide;
    const bool flat = xs.size() == 2 && xs[1] == kImagePixels;
    if (!image && !flat)
      throw DimensionError(std::string(arch_name(arch)) + " expects (N,1,16,16) or (N,256), got " + shape_str(xs));
  }
  std::size_t p = 0;
  Var h = x;
  for (const auto& l : layers(arch)) {
    switch (l.kind) {
      case K::Flatten:
        h = reshape(h, {h.shape()[0], h.value().size() / h.shape()[0]});
        break;
      case K::Relu:
        h = relu(h);
        break;
      case K::Dense:
        h = add_bias(matmul(h, params[p]), params[p + 1]);
        p += 2;
        break;
      case K::Conv:
        h = add_bias(conv2d(h, params[p]), params[p + 1]);
        p += 2;
        break;
    }
  }
  if (p != params.size()) throw DimensionError("parameter count does not match arch");
  return h;
}

Tensor forward(const ParamSet& params, const Tensor& x) {
  Tape tape;
  auto vars = bind(tape, params, false);
  return forward(params.arch, vars, tape.constant(x)).value();
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows needs (N, C)");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const ParamSet& params, const Tensor& x) { return argmax_rows(forward(params, x)); }

double squared_norm(std::span<const Tensor> tensors) {
  double s = 0.0;
  for (const auto& t : tensors) s += tlab::dot(t, t);
  return s;
}

namespace {
constexpr char kMagic[4] = {'T', 'L', 'A', 'B'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize(const ParamSet& params) {
  io::ByteWriter w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kVersion);
  w.u8(static_cast<std::uint8_t>(params.arch));
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.params) {
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.raw(std::span(reinterpret_cast<const std::uint8_t*>(p.name.data()), p.name.size()));
    w.u8(static_cast<std::uint8_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.tensor.values()) w.f64(v);
  }
  return w.take();
}

void save(const ParamSet& params, const std::filesystem::path& path) { io::write_file_atomic(path, serialize(params)); }

ParamSet deserialize(std::span<const std::uint8_t> bytes, std::optional<Arch> expected) {
  io::ByteReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad checkpoint magic");
  r.raw(4);
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint8_t arch_id = r.u8();
  if (arch_id > 3) throw FormatError("unknown arch id " + std::to_string(arch_id));
  ParamSet ps;
  ps.arch = static_cast<Arch>(arch_id);
  if (expected && *expected != ps.arch)
    throw DimensionError("checkpoint holds " + std::string(arch_name(ps.arch)) + " parameters, expected " +
                         std::string(arch_name(*expected)));
  const auto layout = parameter_layout(ps.arch);
  const std::uint32_t count = r.u32();
  if (count != layout.size())
    throw DimensionError("checkpoint has " + std::to_string(count) + " tensors, registry expects " +
                         std::to_string(layout.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    auto name_bytes = r.raw(len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    if (name != layout[i].first || shape != layout[i].second)
      throw DimensionError("checkpoint tensor " + name + shape_str(shape) + " does not match registry entry " +
                           layout[i].first + shape_str(layout[i].second));
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = r.f64();
    ps.params.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint payload");
  return ps;
}

ParamSet load(const std::filesystem::path& path, std::optional<Arch> expected) {
  return deserialize(io::read_file(path), expected);
}

}  // namespace tlab
