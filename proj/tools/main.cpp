#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "commands.hpp"
#include "revtrain/errors.hpp"

namespace revtrain::cli {

namespace {

template <typename N>
std::vector<N> split_numbers(const std::string& s) {
  std::vector<N> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream in(item);
    N v{};
    in >> v;
    if (!in || !(in >> std::ws).eof()) throw ConfigError("cannot parse '" + item + "' in list '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

}  // namespace

std::vector<double> parse_list(const std::string& s) { return split_numbers<double>(s); }
std::vector<int> parse_int_list(const std::string& s) { return split_numbers<int>(s); }

std::string dataset_root(const std::string& flag) {
  std::string dir = flag;
  if (dir.empty()) {
    const char* env = std::getenv("REVTRAIN_DATA");
    if (env == nullptr || *env == '\0') throw ConfigError("no dataset: pass --data or set REVTRAIN_DATA");
    dir = env;
  }
  if (!std::filesystem::is_directory(dir)) throw ConfigError("dataset directory not found: " + dir);
  return dir;
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

}  // namespace revtrain::cli

int main(int argc, char** argv) {
  using namespace revtrain;
  CLI::App app{"revtrain: reversible and invertible backpropagation toolkit"};
  app.require_subcommand(1, 1);
  int code = cli::kOk;
  cli::add_train(app, code);
  cli::add_memcost(app, code);
  cli::add_snr_alpha(app, code);
  cli::add_snr_profile(app, code);
  cli::add_gradcheck(app, code);
  cli::add_inspect_data(app, code);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return cli::kConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return cli::kConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return cli::kConfig;
  } catch (const DomainError& e) {
    std::cerr << "domain error: " << e.what() << '\n';
    return cli::kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return cli::kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kRuntime;
  }
  return code;
}
