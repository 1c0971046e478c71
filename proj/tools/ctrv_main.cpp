#include "ctrv/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return ctrv::cli::runCli(std::move(args));
}
