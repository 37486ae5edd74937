#include "pairsupcon/commands.hpp"

int main(int argc, char** argv) { return pairsupcon::cli::run(argc, argv); }
