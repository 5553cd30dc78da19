#include "sage/cli.hpp"

int main(int argc, char** argv) { return sage::cli::run(argc, argv); }
