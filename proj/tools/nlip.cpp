#include "nlip/cli.hpp"

int main(int argc, char** argv) { return nlip::cli::run_cli(argc, argv); }
