#pragma once

#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "effisegnet/data.hpp"

namespace effisegnet {

/// Entry point behind the `effisegnet` executable. `args[0]` is the program
/// name. Returns the process exit code: 0 on success, otherwise
/// exit_code(ErrorClass) for classified failures and 1 for anything else.
int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

/// Content hash over every (id, image bytes, mask bytes) of the index.
std::string dataset_hash(const SampleIndex& index);

/// Pretrained / random / ratio table, one row per variant, with Table-I
/// style rounding followed by the exact counts.
std::string parameter_table(const std::vector<Variant>& variants);

}  // namespace effisegnet
