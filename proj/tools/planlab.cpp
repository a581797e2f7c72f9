#include "planlab/cli.hpp"

int main(int argc, char** argv) { return planlab::cli::run(argc, argv); }
