#include "retina/cli.hpp"

int main(int argc, char** argv) { return retina::run_cli(argc, argv); }
