#include "mexit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

namespace mexit {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[4] = {'P', 'E', 'P', 'H'};

void write_kind(std::ostream& os, const LayerKind& kind) {
  std::visit(Overloaded{[&](const Conv2d& c) {
                          os << "conv2d " << c.c_in << ' ' << c.c_out << ' ' << c.k_h << ' ' << c.k_w << ' '
                             << c.stride << ' ' << c.pad << ' ' << int(c.bias) << '\n';
                        },
                        [&](const Dense& d) { os << "dense " << d.n_in << ' ' << d.n_out << ' ' << int(d.bias) << '\n'; },
                        [&](const Relu&) { os << "relu\n"; },
                        [&](const MaxPool& p) { os << "maxpool " << p.k << ' ' << p.stride << '\n'; },
                        [&](const GlobalAvgPool&) { os << "globalavgpool\n"; }},
             kind);
}

void write_stack(std::ostream& os, const LayerStack<float>& stack) {
  for (const auto& l : stack) write_kind(os, l.kind);
  os << "end\n";
}

LayerKind read_kind(const std::string& line) {
  std::istringstream is(line);
  std::string name;
  is >> name;
  auto fail = [&]() -> LayerKind { throw LoadError("checkpoint: malformed layer line '" + line + "'"); };
  if (name == "conv2d") {
    Conv2d c;
    int bias = 0;
    if (!(is >> c.c_in >> c.c_out >> c.k_h >> c.k_w >> c.stride >> c.pad >> bias)) return fail();
    c.bias = bias != 0;
    return c;
  }
  if (name == "dense") {
    Dense d;
    int bias = 0;
    if (!(is >> d.n_in >> d.n_out >> bias)) return fail();
    d.bias = bias != 0;
    return d;
  }
  if (name == "relu") return Relu{};
  if (name == "maxpool") {
    MaxPool p;
    if (!(is >> p.k >> p.stride)) return fail();
    return p;
  }
  if (name == "globalavgpool") return GlobalAvgPool{};
  return fail();
}

LayerStack<float> read_stack(std::istream& is) {
  LayerStack<float> stack;
  std::string line;
  while (std::getline(is, line)) {
    if (line == "end") return stack;
    try {
      stack.emplace_back(read_kind(line));
    } catch (const ConfigError& e) {
      throw LoadError(std::string("checkpoint: invalid layer: ") + e.what());
    }
  }
  throw LoadError("checkpoint: unterminated layer list");
}

template <typename F>
void for_each_param(Model& m, F&& f) {
  auto visit = [&](LayerStack<float>& s) {
    for (auto& l : s) {
      if (!l.weight.empty()) f(l.weight);
      if (!l.bias.empty()) f(l.bias);
    }
  };
  for (auto& b : m.blocks) visit(b);
  visit(m.classifier);
  for (auto& e : m.exits) visit(e.layers);
}

}  // namespace

std::string topology_text(const Model& m) {
  std::ostringstream os;
  os << "input " << m.input_shape[0] << ' ' << m.input_shape[1] << ' ' << m.input_shape[2] << '\n';
  os << "classes " << m.num_classes << '\n';
  for (const auto& b : m.blocks) {
    os << "block\n";
    write_stack(os, b);
  }
  os << "classifier\n";
  write_stack(os, m.classifier);
  for (const auto& e : m.exits) {
    os << "exit " << e.block << '\n';
    write_stack(os, e.layers);
  }
  return os.str();
}

Model parse_topology(const std::string& text) {
  Model m;
  std::istringstream is(text);
  std::string line;
  bool have_classifier = false;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "input") {
      Shape s(3);
      if (!(ls >> s[0] >> s[1] >> s[2])) throw LoadError("checkpoint: malformed input line");
      m.input_shape = s;
    } else if (key == "classes") {
      if (!(ls >> m.num_classes)) throw LoadError("checkpoint: malformed classes line");
    } else if (key == "block") {
      m.blocks.push_back(read_stack(is));
    } else if (key == "classifier") {
      m.classifier = read_stack(is);
      have_classifier = true;
    } else if (key == "exit") {
      ExitHead<float> e;
      if (!(ls >> e.block)) throw LoadError("checkpoint: malformed exit line");
      e.layers = read_stack(is);
      m.exits.push_back(std::move(e));
    } else if (!key.empty()) {
      throw LoadError("checkpoint: unknown topology record '" + key + "'");
    }
  }
  if (m.input_shape.size() != 3 || !have_classifier) throw LoadError("checkpoint: incomplete topology");
  try {
    validate(m);
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint: invalid topology: ") + e.what());
  }
  return m;
}

void save_checkpoint(const Model& model, const std::string& path) {
  validate(model);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open checkpoint for writing: " + path);
  const std::string topo = topology_text(model);
  const std::uint16_t version = kCheckpointVersion;
  const auto len = static_cast<std::uint32_t>(topo.size());
  os.write(kMagic, 4);
  os.write(reinterpret_cast<const char*>(&version), sizeof version);
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(topo.data(), static_cast<std::streamsize>(topo.size()));
  Model copy = model;
  for_each_param(copy, [&](const Tensorf& t) {
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  });
  if (!os) throw ConfigError("failed writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint: " + path);
  const std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (bytes.size() - pos < n) throw LoadError("checkpoint truncated: " + path);
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  char magic[4];
  take(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw LoadError("not a checkpoint (bad magic): " + path);
  std::uint16_t version = 0;
  take(&version, sizeof version);
  if (version != kCheckpointVersion)
    throw LoadError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  std::uint32_t len = 0;
  take(&len, sizeof len);
  std::string topo(len, '\0');
  take(topo.data(), len);
  Model m = parse_topology(topo);
  for_each_param(m, [&](Tensorf& t) { take(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float)); });
  if (pos != bytes.size()) throw LoadError("checkpoint has trailing bytes: " + path);
  return m;
}

}  // namespace mexit
