#include <string>
#include <vector>

#include "savs/cli.hpp"

int main(int argc, char** argv) { return savs::cli::run(std::vector<std::string>(argv, argv + argc)); }
