#include "evb/cli.hpp"

int main(int argc, char** argv) { return evb::cli::run(argc, argv); }
