# HTTP surface of the video search service
