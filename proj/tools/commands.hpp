#pragma once

#include <string>
#include <vector>

#include <CLI11.hpp>

namespace revtrain::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kConfig = 2;
inline constexpr int kRuntime = 3;

// Each registers one subcommand; its callback stores the exit code in `code`.
void add_train(CLI::App& app, int& code);
void add_memcost(CLI::App& app, int& code);
void add_snr_alpha(CLI::App& app, int& code);
void add_snr_profile(CLI::App& app, int& code);
void add_gradcheck(CLI::App& app, int& code);
void add_inspect_data(CLI::App& app, int& code);

// "1,2,5" -> {1, 2, 5}; ConfigError on junk.
std::vector<double> parse_list(const std::string& s);
std::vector<int> parse_int_list(const std::string& s);
// Flag value, else $REVTRAIN_DATA, else ConfigError.
std::string dataset_root(const std::string& flag);
// Empty or "-" writes to stdout.
void write_output(const std::string& path, const std::string& text);

}  // namespace revtrain::cli
