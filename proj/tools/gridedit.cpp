#include <iostream>

#include "gridedit/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return gridedit::cli::run(args, std::cout, std::cerr);
}
