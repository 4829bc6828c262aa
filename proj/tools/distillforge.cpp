#include <iostream>

#include "distillforge/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return distillforge::run_cli(args, std::cout, std::cerr);
}
