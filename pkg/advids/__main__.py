from advids.main import main

main()
