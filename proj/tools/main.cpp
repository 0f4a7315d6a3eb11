#include "cli.hpp"

int main(int argc, char** argv) { return mexit::cli::run_cli(argc, argv); }
