#include "gattn/cli.hpp"

int main(int argc, char** argv) { return gattn::cli::run(argc, argv); }
