#include "granage/cli.hpp"

int main(int argc, char** argv) { return granage::cli::run(argc, argv); }
