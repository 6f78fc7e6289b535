#include "sptnet/checkpoint.hpp"

#include <sstream>

#include "sptnet/io.hpp"

namespace sptnet {

namespace {

constexpr const char* kHeader = "sptnet-checkpoint 1";

}  // namespace

const std::string& Archive::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  throw IoError("checkpoint has no meta entry '" + key + "'");
}

const Matrix<float>& Archive::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw IoError("checkpoint has no tensor '" + name + "'");
}

void save_archive(const std::filesystem::path& dir, const Archive& archive) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream manifest;
  manifest << kHeader << "\nblob tensors.bin\n";
  for (const auto& [k, v] : archive.meta) manifest << "meta " << k << ' ' << v << '\n';
  std::istringstream config(archive.config);
  for (std::string line; std::getline(config, line);)
    if (!line.empty()) manifest << "config " << line << '\n';
  std::vector<float> blob;
  for (const auto& [name, t] : archive.tensors) {
    manifest << "tensor " << name << ' ' << t.rows() << ' ' << t.cols() << ' ' << blob.size() << '\n';
    blob.insert(blob.end(), t.data(), t.data() + t.size());
  }
  write_f32_le(dir / "tensors.bin", blob);
  write_text(dir / "manifest.txt", manifest.str());
}

Archive load_archive(const std::filesystem::path& dir) {
  const std::filesystem::path path = dir / "manifest.txt";
  if (!std::filesystem::exists(path)) throw IoError("no checkpoint at " + dir.string());
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw IoError(path.string() + ": not a checkpoint manifest");
  Archive a;
  std::string blob_name;
  struct Entry {
    std::string name;
    Index rows, cols;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::ostringstream config;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "blob") {
      ls >> blob_name;
    } else if (kind == "meta") {
      std::string k, v;
      ls >> k;
      std::getline(ls >> std::ws, v);
      a.meta.emplace_back(k, v);
    } else if (kind == "config") {
      config << line.substr(7) << '\n';
    } else if (kind == "tensor") {
      Entry e;
      if (!(ls >> e.name >> e.rows >> e.cols >> e.offset) || e.rows < 0 || e.cols < 0)
        throw IoError(path.string() + ": malformed tensor line '" + line + "'");
      entries.push_back(e);
    } else {
      throw IoError(path.string() + ": unexpected line '" + line + "'");
    }
  }
  if (blob_name.empty()) throw IoError(path.string() + ": missing blob line");
  a.config = config.str();
  const std::vector<float> blob = read_f32_le(dir / blob_name);
  for (const auto& e : entries) {
    const auto size = static_cast<std::size_t>(e.rows * e.cols);
    if (e.offset + size > blob.size()) throw IoError(path.string() + ": tensor " + e.name + " runs past the blob");
    Matrix<float> t(e.rows, e.cols);
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(e.offset),
              blob.begin() + static_cast<std::ptrdiff_t>(e.offset + size), t.data());
    a.tensors.emplace_back(e.name, std::move(t));
  }
  return a;
}

Archive to_archive(const TrainState& state, const std::string& config) {
  Archive a;
  a.meta = {{"epoch", std::to_string(state.epoch)},
            {"iteration", std::to_string(state.iteration)},
            {"stage", to_string(state.stage)}};
  a.config = config;
  auto add = [&](const std::string& prefix) {
    return [&a, prefix](const std::string& name, const Matrix<float>& t) { a.tensors.emplace_back(prefix + name, t); };
  };
  state.model.visit(add("model."));
  state.prompts.visit(add(""));
  state.model_momentum.visit(add("momentum.model."));
  state.prompt_momentum.visit(add("momentum."));
  return a;
}

void restore_state(const Archive& a, TrainState& state) {
  std::size_t used = 0;
  auto fill = [&](const std::string& prefix) {
    return [&a, &used, prefix](const std::string& name, Matrix<float>& t) {
      const Matrix<float>& src = a.tensor(prefix + name);
      if (src.rows() != t.rows() || src.cols() != t.cols())
        throw IoError("checkpoint tensor " + prefix + name + " has shape " + std::to_string(src.rows()) + "x" +
                      std::to_string(src.cols()) + ", expected " + std::to_string(t.rows()) + "x" +
                      std::to_string(t.cols()));
      t = src;
      ++used;
    };
  };
  state.model.visit(fill("model."));
  state.prompts.visit(fill(""));
  state.model_momentum.visit(fill("momentum.model."));
  state.prompt_momentum.visit(fill("momentum."));
  if (used != a.tensors.size()) throw IoError("checkpoint holds tensors this configuration does not use");
  try {
    state.epoch = std::stoi(a.meta_value("epoch"));
    state.iteration = std::stoll(a.meta_value("iteration"));
  } catch (const std::logic_error&) {
    throw IoError("checkpoint meta epoch/iteration is not an integer");
  }
  try {
    state.stage = parse_stage(a.meta_value("stage"));
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("checkpoint meta stage: ") + e.what());
  }
}

}  // namespace sptnet
