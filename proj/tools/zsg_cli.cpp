#include <string>
#include <vector>

#include "zsg/cli.hpp"

int main(int argc, char** argv) { return zsg::cli::run(std::vector<std::string>(argv + 1, argv + argc)); }
