#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace layermatch::cli {

/// Runs the command line with the given arguments (program name first). Returns the exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace layermatch::cli
